//! Model core: tensors and autodiff, camera geometry, query tokenization,
//! streaming memory, the attention stack, task heads and losses.

pub mod config;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod labels;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod temporal_memory;
pub mod tokenizer;
pub mod transformer_blocks;

pub use config::{ModelConfig, Preset};
pub use error::{Error, Result};
pub use model::{DriveTransformer, FrameInput};
