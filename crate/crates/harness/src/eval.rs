//! Model inference over clips, closed-loop episodes and robustness sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use dtx_core::geometry::{CameraModel, RigidTransform};
use dtx_core::heads::{select_plan, FramePredictions};
use dtx_core::labels::FrameLabels;
use dtx_core::numerics::Tape;
use dtx_core::temporal_memory::TemporalQueue;
use dtx_core::tokenizer::RgbImage;
use dtx_core::{DriveTransformer, FrameInput};
use dtx_simworld::{default_cameras, render_frame, Clip, Family, Scenario, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{open_loop_metrics, OpenLoopMetrics};
use crate::perturb::{PerturbKind, Perturbation};
use crate::train::frame_input;

/// Score multiplier per collision.
pub const COLLISION_PENALTY: f64 = 0.6;
/// Score multiplier per off-route event.
pub const OFF_ROUTE_PENALTY: f64 = 0.7;
/// Completion needed for a successful episode.
pub const SUCCESS_COMPLETION: f64 = 0.95;

/// Streams every clip through the model (queue reset per clip) and returns
/// final-block predictions in frame order.
pub fn predict_clips(model: &DriveTransformer, clips: &[Clip], perturb: Option<&Perturbation>) -> Result<Vec<FramePredictions>> {
    let per_clip: Vec<Vec<FramePredictions>> = clips
        .par_iter()
        .map(|clip| {
            let poses = clip.ego_poses();
            let mut queue = model.new_queue();
            let mut out = Vec::with_capacity(clip.frames.len());
            for f in 0..clip.frames.len() {
                let base = frame_input(clip, f, &poses);
                let (mut images, mut cams) = (clip.frames[f].images.clone(), clip.cameras.clone());
                if let Some(p) = perturb {
                    p.apply(&mut images, &mut cams, clip.frames[f].step)?;
                }
                let input = FrameInput {
                    images: &images,
                    cameras: &cams,
                    ..base
                };
                out.push(infer(model, &input, &mut queue)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Forward without gradients; pushes the frame into `queue`.
pub fn infer(model: &DriveTransformer, input: &FrameInput<'_>, queue: &mut TemporalQueue) -> Result<FramePredictions> {
    let tape = Tape::inference(model.cfg.precision);
    let out = model.forward(&tape, input, queue, None)?;
    let mem = model.frame_memory(&out)?;
    queue.push_frame(&mem, model.cfg.top_k, input.step)?;
    Ok(out.final_predictions().clone())
}

pub fn clip_labels(clips: &[Clip]) -> Vec<FrameLabels> {
    clips.iter().flat_map(|c| c.frames.iter().map(|f| f.labels.clone())).collect()
}

pub fn evaluate_open_loop(model: &DriveTransformer, clips: &[Clip]) -> Result<(OpenLoopMetrics, Vec<FramePredictions>)> {
    let preds = predict_clips(model, clips, None)?;
    Ok((open_loop_metrics(&preds, &clip_labels(clips))?, preds))
}

/// What a policy sees at one closed-loop step.
pub struct Observation<'a> {
    pub world: &'a World<'a>,
    /// Rendered and possibly corrupted images; empty for policies that do
    /// not read sensors.
    pub images: Vec<RgbImage>,
    pub cameras: Vec<CameraModel>,
}

pub trait Policy {
    fn uses_sensors(&self) -> bool;
    /// Ego-frame waypoints at the world's plan spacing.
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<[f64; 2]>>;
}

/// Privileged rule-based driver; ignores sensors.
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl Policy for ExpertPolicy {
    fn uses_sensors(&self) -> bool {
        false
    }

    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<[f64; 2]>> {
        Ok(obs.world.expert_plan(self.horizon, dtx_simworld::world::PLAN_DT).waypoints)
    }
}

/// Always plans to stay in place.
pub struct ZeroPolicy {
    pub horizon: usize,
}

impl Policy for ZeroPolicy {
    fn uses_sensors(&self) -> bool {
        false
    }

    fn plan(&mut self, _: &Observation<'_>) -> Result<Vec<[f64; 2]>> {
        Ok(vec![[0.0, 0.0]; self.horizon])
    }
}

/// The learned planner, streaming its own temporal memory.
pub struct ModelPolicy<'m> {
    pub model: &'m DriveTransformer,
    queue: TemporalQueue,
    poses: BTreeMap<i64, RigidTransform>,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m DriveTransformer) -> Self {
        Self {
            model,
            queue: model.new_queue(),
            poses: BTreeMap::new(),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn uses_sensors(&self) -> bool {
        true
    }

    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<[f64; 2]>> {
        let w = obs.world;
        let step = w.step as i64;
        self.poses.insert(step, w.ego.pose.transform());
        let keep = self.model.cfg.queue_len as i64 + 1;
        self.poses.retain(|&s, _| s > step - keep);
        // route command and proprioception only; no privileged scene state
        let canbus = w.expert_plan(self.model.cfg.plan_horizon, self.model.cfg.waypoint_dt).canbus;
        let input = FrameInput {
            images: &obs.images,
            cameras: &obs.cameras,
            canbus,
            step,
            ego_poses: &self.poses,
        };
        let preds = infer(self.model, &input, &mut self.queue)?;
        Ok(select_plan(&preds.plan).1.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub family: Family,
    pub seed: u64,
    pub completion: f64,
    pub collisions: usize,
    pub off_route: usize,
    pub score: f64,
    pub success: bool,
}

/// Completion discounted by every infraction.
pub fn episode_score(completion: f64, collisions: usize, off_route: usize) -> f64 {
    completion * COLLISION_PENALTY.powi(collisions as i32) * OFF_ROUTE_PENALTY.powi(off_route as i32)
}

pub fn episode_success(completion: f64, collisions: usize) -> bool {
    completion >= SUCCESS_COMPLETION && collisions == 0
}

pub fn run_episode(scn: &Scenario, policy: &mut dyn Policy, cameras: &[CameraModel], perturb: Option<&Perturbation>) -> Result<EpisodeResult> {
    let mut world = World::new(scn);
    while !world.done() {
        let (mut images, mut cams) = (Vec::new(), cameras.to_vec());
        if policy.uses_sensors() {
            images = render_frame(scn, world.step, &world.ego.pose, cameras);
            if let Some(p) = perturb {
                p.apply(&mut images, &mut cams, world.step)?;
            }
        }
        let plan = policy.plan(&Observation {
            world: &world,
            images,
            cameras: cams,
        })?;
        if plan.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: world.step,
                detail: "planned waypoint".into(),
            });
        }
        world.step(&plan);
    }
    let completion = world.completion();
    Ok(EpisodeResult {
        family: scn.family,
        seed: scn.seed,
        completion,
        collisions: world.collisions,
        off_route: world.off_route_events,
        score: episode_score(completion, world.collisions, world.off_route_events),
        success: episode_success(completion, world.collisions),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMetrics {
    pub episodes: Vec<EpisodeResult>,
    pub completion: f64,
    pub score: f64,
    pub success_rate: f64,
    /// Collisions plus off-route events over all episodes.
    pub infractions: usize,
}

impl ClosedLoopMetrics {
    pub fn from_episodes(episodes: Vec<EpisodeResult>) -> Self {
        let n = episodes.len().max(1) as f64;
        Self {
            completion: episodes.iter().map(|e| e.completion).sum::<f64>() / n,
            score: episodes.iter().map(|e| e.score).sum::<f64>() / n,
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
            infractions: episodes.iter().map(|e| e.collisions + e.off_route).sum(),
            episodes,
        }
    }
}

/// Runs one episode per scenario in parallel; `make_policy` builds a fresh
/// policy for each.
pub fn evaluate_closed_loop<P: Policy>(
    scenarios: &[Scenario],
    make_policy: impl Fn() -> P + Sync,
    image_size: usize,
    perturb: Option<&Perturbation>,
) -> Result<ClosedLoopMetrics> {
    let cameras = default_cameras(image_size);
    let episodes = scenarios
        .par_iter()
        .map(|scn| run_episode(scn, &mut make_policy(), &cameras, perturb))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedLoopMetrics::from_episodes(episodes))
}

/// Closed-loop and, when given, open-loop results under one condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `clean` or the perturbation kind.
    pub condition: String,
    pub open: Option<OpenLoopMetrics>,
    pub closed: Option<ClosedLoopMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "condition,frames,ap_0.5,ap_1,ap_2,ap_4,map_ap,min_ade,min_fde,miss_rate,plan_l2,collision_rate,episodes,completion,score,success_rate,infractions";

    pub fn csv_row(&self) -> String {
        let open = match &self.open {
            Some(o) => format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                o.frames,
                o.det_ap[0],
                o.det_ap[1],
                o.det_ap[2],
                o.det_ap[3],
                o.map_ap,
                o.min_ade,
                o.min_fde,
                o.miss_rate,
                o.plan_l2,
                o.collision_rate
            ),
            None => ",".repeat(10),
        };
        let closed = match &self.closed {
            Some(c) => format!(
                "{},{},{},{},{}",
                c.episodes.len(),
                c.completion,
                c.score,
                c.success_rate,
                c.infractions
            ),
            None => ",".repeat(4),
        };
        format!("{},{open},{closed}", self.condition)
    }
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", MetricReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs of a robustness sweep. `model` enables the open-loop part.
pub struct RobustSetup<'a, P, F: Fn() -> P + Sync> {
    pub model: Option<&'a DriveTransformer>,
    pub clips: &'a [Clip],
    pub scenarios: &'a [Scenario],
    pub make_policy: F,
    pub image_size: usize,
    pub intensity: f64,
    pub seed: u64,
}

/// One report per perturbation kind, in [`PerturbKind::ALL`] order.
pub fn evaluate_robust<P: Policy, F: Fn() -> P + Sync>(setup: &RobustSetup<'_, P, F>) -> Result<Vec<MetricReport>> {
    PerturbKind::ALL
        .into_iter()
        .map(|kind| {
            let p = Perturbation::new(kind, setup.intensity, setup.seed);
            let open = match setup.model {
                Some(m) if !setup.clips.is_empty() => {
                    let preds = predict_clips(m, setup.clips, Some(&p))?;
                    Some(open_loop_metrics(&preds, &clip_labels(setup.clips))?)
                }
                _ => None,
            };
            let closed = if setup.scenarios.is_empty() {
                None
            } else {
                Some(evaluate_closed_loop(setup.scenarios, &setup.make_policy, setup.image_size, Some(&p))?)
            };
            Ok(MetricReport {
                condition: kind.name().to_string(),
                open,
                closed,
            })
        })
        .collect()
}
