//! Ground-truth records consumed by the losses and metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose2;
use crate::tokenizer::CanbusState;

/// Agent box in the ego frame of its frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    pub velocity: [f64; 2],
    pub class: usize,
    /// Future waypoints in the agent's own frame at this step.
    pub future: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPolyline {
    pub points: Vec<[f64; 2]>,
    pub class: usize,
}

impl GtPolyline {
    pub fn reversed(&self) -> Self {
        Self {
            points: self.points.iter().rev().copied().collect(),
            class: self.class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub step: i64,
    pub boxes: Vec<GtBox>,
    pub polylines: Vec<GtPolyline>,
    /// Ego waypoints in the current ego frame.
    pub ego_future: Vec<[f64; 2]>,
    pub canbus: CanbusState,
    /// Ego pose in the world frame.
    pub ego_pose: Pose2,
}
