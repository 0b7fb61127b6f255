//! Training, evaluation, robustness sweeps, benchmarking and checkpoints.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod perturb;
pub mod train;

pub use error::{Error, Result};
pub use eval::MetricReport;
pub use optim::{Schedule, TrainConfig};
pub use train::Trainer;
