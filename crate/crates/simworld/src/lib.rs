//! Synthetic driving world used as the data source and closed-loop test bed.
//!
//! Agents follow closed-form scripts, so any step can be labeled or rendered
//! without replaying the episode. Only the ego is integrated step by step.

pub mod dataset;
pub mod error;
pub mod expert;
pub mod io;
pub mod labeling;
pub mod path;
pub mod render;
pub mod scenario;
pub mod world;

pub use dataset::{default_cameras, generate_clip, Clip, FrameSample};
pub use error::{Error, Result};
pub use expert::{expert_plan, ExpertPlan};
pub use labeling::label_frame;
pub use render::render_frame;
pub use scenario::{generate_scenario, AgentClass, AgentScript, Family, MapClass, MapElement, Scenario};
pub use world::{EgoState, World};
