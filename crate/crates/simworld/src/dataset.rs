//! Expert-driven clips of rendered, labeled frames.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};

use dtx_core::geometry::{CameraModel, RigidTransform};
use dtx_core::labels::FrameLabels;
use dtx_core::tokenizer::RgbImage;
use dtx_core::ModelConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::label_frame;
use crate::render::render_frame;
use crate::scenario::Scenario;
use crate::world::{EgoState, World, PLAN_DT};

pub const CAMERA_HEIGHT: f64 = 1.6;
pub const IMAGE_SIZE: usize = 96;

/// Front, left, rear and right cameras with a 60 degree field of view.
pub fn default_cameras(size: usize) -> Vec<CameraModel> {
    [0.0, FRAC_PI_2, PI, -FRAC_PI_2]
        .into_iter()
        .map(|yaw| CameraModel::looking(yaw, CAMERA_HEIGHT, FRAC_PI_3, size, size))
        .collect()
}

/// Ego states of the expert-driven episode, one per step.
pub fn expert_rollout(scn: &Scenario) -> Vec<EgoState> {
    let mut w = World::new(scn);
    let mut states = vec![w.ego];
    while !w.done() {
        let plan = w.expert_plan(6, PLAN_DT);
        w.step(&plan.waypoints);
        states.push(w.ego);
    }
    states
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub step: usize,
    pub images: Vec<RgbImage>,
    pub labels: FrameLabels,
    pub ego: EgoState,
}

/// Consecutive frames of one scenario, in step order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub scenario: Scenario,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<FrameSample>,
}

impl Clip {
    /// Ego-to-world transform of every frame, keyed by step.
    pub fn ego_poses(&self) -> BTreeMap<i64, RigidTransform> {
        self.frames.iter().map(|f| (f.step as i64, f.ego.pose.transform())).collect()
    }
}

/// Renders and labels `steps` of the expert-driven episode. Frames are
/// produced in parallel; the result is independent of thread count.
pub fn generate_clip(scn: Scenario, steps: std::ops::Range<usize>, cameras: Vec<CameraModel>, cfg: &ModelConfig) -> Result<Clip> {
    if steps.end > scn.steps || steps.is_empty() {
        return Err(Error::StepOutOfRange {
            step: steps.end,
            steps: scn.steps,
        });
    }
    let states = expert_rollout(&scn);
    let frames = steps
        .into_par_iter()
        .map(|step| {
            let ego = states[step];
            FrameSample {
                step,
                images: render_frame(&scn, step, &ego.pose, &cameras),
                labels: label_frame(&scn, step, &ego, cfg),
                ego,
            }
        })
        .collect();
    Ok(Clip {
        scenario: scn,
        cameras,
        frames,
    })
}
