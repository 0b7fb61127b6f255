//! Per-block task decoders and the anchor/PE refresh between blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadScales, ModeThresholds, ModelConfig, PLAN_MODES};
use crate::error::{shape_err, Error, Result};
use crate::geometry::sincos_encode;
use crate::numerics::{mlp_forward, Activation, MlpParams, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{encode_agent_pe, encode_ego_pe, encode_map_pe, AgentAnchor, QueryParams, TaskQueries};

/// Ego driving modes; discriminants are the plan-slot indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlanMode {
    Straight = 0,
    Stop = 1,
    Left = 2,
    SharpLeft = 3,
    Right = 4,
    SharpRight = 5,
}

impl PlanMode {
    pub const ALL: [PlanMode; PLAN_MODES] = [
        PlanMode::Straight,
        PlanMode::Stop,
        PlanMode::Left,
        PlanMode::SharpLeft,
        PlanMode::Right,
        PlanMode::SharpRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Bins an ego-frame trajectory (starting implicitly at the origin).
///
/// Stop when the path is shorter than `stop_distance`; otherwise by the
/// heading of the last non-degenerate segment. Boundary values go to the
/// milder class.
pub fn classify_mode(trajectory: &[[f64; 2]], th: &ModeThresholds) -> PlanMode {
    let mut prev = [0.0, 0.0];
    let mut length = 0.0;
    let mut tangent = None;
    for p in trajectory {
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        let seg = dx.hypot(dy);
        length += seg;
        if seg > 1e-9 {
            tangent = Some(dy.atan2(dx));
        }
        prev = *p;
    }
    let theta = match tangent {
        Some(t) if length >= th.stop_distance => t.to_degrees(),
        _ => return PlanMode::Stop,
    };
    let a = theta.abs();
    if a <= th.straight_deg {
        PlanMode::Straight
    } else if a <= th.sharp_deg {
        if theta > 0.0 {
            PlanMode::Left
        } else {
            PlanMode::Right
        }
    } else if theta > 0.0 {
        PlanMode::SharpLeft
    } else {
        PlanMode::SharpRight
    }
}

/// PointNet used to pool point-level map queries per instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointNetParams {
    pub point: MlpParams,
    pub instance: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub detect: MlpParams,
    pub motion: MlpParams,
    pub map_point: MlpParams,
    pub map_class: MlpParams,
    pub pointnet: PointNetParams,
    pub plan: MlpParams,
    pub plan_class: MlpParams,
    pub mode_embed: MlpParams,
}

/// Width of the detection head output: center, size, (sin, cos), velocity, logits.
pub fn detect_width(agent_classes: usize) -> usize {
    10 + agent_classes + 1
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden;
        let act = Activation::Relu;
        let motion_out = cfg.motion_modes * (2 * cfg.motion_horizon + 1);
        let heads = Self {
            detect: MlpParams::new(store, "head.detect", &[d, d, detect_width(cfg.agent_classes)], act, rng)?,
            motion: MlpParams::new(store, "head.motion", &[d, d, motion_out], act, rng)?,
            map_point: MlpParams::new(store, "head.map_point", &[d, d, 2], act, rng)?,
            map_class: MlpParams::new(store, "head.map_class", &[d, d, cfg.map_classes + 1], act, rng)?,
            pointnet: PointNetParams {
                point: MlpParams::new(store, "head.pointnet.point", &[d, d, d], act, rng)?,
                instance: MlpParams::new(store, "head.pointnet.instance", &[d, d], act, rng)?,
            },
            plan: MlpParams::new(store, "head.plan", &[d, d, 2 * cfg.plan_horizon], act, rng)?,
            plan_class: MlpParams::new(store, "head.plan_class", &[d, d, 1], act, rng)?,
            mode_embed: MlpParams::new(store, "head.mode_embed", &[2 * cfg.num_freqs, d, d], act, rng)?,
        };
        for mlp in [&heads.detect, &heads.motion, &heads.map_point, &heads.map_class, &heads.plan, &heads.plan_class] {
            let w = mlp.last().weight;
            let scaled = store.get(w).map(|v| v * OUTPUT_INIT_SCALE);
            store.set(w, scaled)?;
        }
        let det_bias = heads.detect.last().bias;
        set_background_prior(store, det_bias, 10, cfg.agent_classes)?;
        set_background_prior(store, heads.map_class.last().bias, 0, cfg.map_classes)?;
        Ok(heads)
    }
}

/// Output layers start near zero so first predictions sit on the anchors.
const OUTPUT_INIT_SCALE: f64 = 0.01;
/// Initial background probability of every classifier.
const BACKGROUND_PRIOR: f64 = 0.9;

fn set_background_prior(store: &mut ParamStore, bias: crate::numerics::ParamId, offset: usize, classes: usize) -> Result<()> {
    let mut b = store.get(bias).clone();
    let fg = (1.0 - BACKGROUND_PRIOR) / classes as f64;
    b.data_mut()[offset + classes] = (BACKGROUND_PRIOR / fg).ln();
    store.set(bias, b)
}

/// Detection fields, one row per agent query.
#[derive(Clone, Copy, Debug)]
pub struct DetectionOutput<'t> {
    pub center: Var<'t>,
    pub size: Var<'t>,
    /// `(sin, cos)` of the heading.
    pub heading: Var<'t>,
    pub velocity: Var<'t>,
    /// Agent classes followed by background.
    pub logits: Var<'t>,
}

/// `modes * horizon` agent-local waypoints per agent, mode-major.
#[derive(Clone, Copy, Debug)]
pub struct MotionOutput<'t> {
    pub trajectories: Var<'t>,
    pub logits: Var<'t>,
    pub modes: usize,
    pub horizon: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MapOutput<'t> {
    /// `N_m x 2 N_point` ego-frame coordinates.
    pub points: Var<'t>,
    /// Map classes followed by background.
    pub logits: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct PlanOutput<'t> {
    /// `6 x 2 H` ego-frame waypoints, one row per [`PlanMode`].
    pub trajectories: Var<'t>,
    /// `1 x 6`.
    pub logits: Var<'t>,
}

/// Head outputs of one block.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs<'t> {
    pub detection: DetectionOutput<'t>,
    pub motion: MotionOutput<'t>,
    pub map: MapOutput<'t>,
    pub plan: PlanOutput<'t>,
}

pub fn detect<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    agent_h: Var<'t>,
    anchors: &[AgentAnchor],
    params: &HeadParams,
    scales: &HeadScales,
) -> Result<DetectionOutput<'t>> {
    if anchors.len() != agent_h.rows() {
        return Err(shape_err!("{} anchors for {} agent queries", anchors.len(), agent_h.rows()));
    }
    let out = mlp_forward(tape, store, agent_h, &params.detect)?;
    let classes = out.cols() - 10;
    let base = Tensor::from_rows(&anchors.iter().map(|a| a.center.to_vec()).collect::<Vec<_>>())?;
    let base = if anchors.is_empty() { Tensor::zeros(&[0, 3]) } else { base };
    Ok(DetectionOutput {
        center: out.slice_cols(0, 3).scale(scales.position).add(tape.constant(base)),
        size: out.slice_cols(3, 3).scale(scales.size),
        heading: out.slice_cols(6, 2),
        velocity: out.slice_cols(8, 2).scale(scales.velocity),
        logits: out.slice_cols(10, classes),
    })
}

pub fn predict_motion<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    agent_h: Var<'t>,
    params: &HeadParams,
    cfg: &ModelConfig,
) -> Result<MotionOutput<'t>> {
    let (m, h) = (cfg.motion_modes, cfg.motion_horizon);
    let out = mlp_forward(tape, store, agent_h, &params.motion)?;
    if out.cols() != m * (2 * h + 1) {
        return Err(shape_err!("motion head emits {} values per agent", out.cols()));
    }
    Ok(MotionOutput {
        trajectories: out.slice_cols(0, 2 * m * h).scale(cfg.scales.trajectory),
        logits: out.slice_cols(2 * m * h, m),
        modes: m,
        horizon: h,
    })
}

/// Instance features: `MLP_inst(max_j MLP_pt(h_ij))`.
pub fn aggregate_map<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    map_h: Var<'t>,
    points_per_polyline: usize,
    params: &PointNetParams,
) -> Result<Var<'t>> {
    if points_per_polyline == 0 || map_h.rows() % points_per_polyline != 0 {
        return Err(shape_err!(
            "{} map rows are not whole polylines of {points_per_polyline}",
            map_h.rows()
        ));
    }
    let per_point = mlp_forward(tape, store, map_h, &params.point)?;
    mlp_forward(tape, store, per_point.segment_max(points_per_polyline), &params.instance)
}

pub fn decode_map<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    map_h: Var<'t>,
    anchors: &[Vec<[f64; 2]>],
    params: &HeadParams,
    scales: &HeadScales,
) -> Result<MapOutput<'t>> {
    let np = anchors.first().map_or(0, Vec::len);
    if np == 0 || anchors.iter().any(|a| a.len() != np) || anchors.len() * np != map_h.rows() {
        return Err(shape_err!("map anchors do not cover {} point queries", map_h.rows()));
    }
    let offsets = mlp_forward(tape, store, map_h, &params.map_point)?.scale(scales.position);
    let flat: Vec<f64> = anchors.iter().flatten().flatten().copied().collect();
    let base = tape.constant(Tensor::matrix(anchors.len() * np, 2, flat)?);
    let points = offsets.add(base).reshape(&[anchors.len(), 2 * np]);
    let inst = aggregate_map(tape, store, map_h, np, &params.pointnet)?;
    let logits = mlp_forward(tape, store, inst, &params.map_class)?;
    Ok(MapOutput { points, logits })
}

/// The six mode embeddings, `MLP(sincos(m))` for `m = 0..6`.
#[derive(Clone, Copy, Debug)]
pub struct ModeEmbedding<'t> {
    pub slots: Var<'t>,
}

impl<'t> ModeEmbedding<'t> {
    pub fn compute(tape: &'t Tape, store: &ParamStore, params: &HeadParams, num_freqs: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..PLAN_MODES).map(|m| sincos_encode(&[m as f64], num_freqs)).collect();
        let slots = mlp_forward(tape, store, tape.constant(Tensor::from_rows(&rows)?), &params.mode_embed)?;
        Ok(Self { slots })
    }
}

pub fn plan<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ego_h: Var<'t>,
    modes: &ModeEmbedding<'t>,
    params: &HeadParams,
    scales: &HeadScales,
) -> Result<PlanOutput<'t>> {
    if ego_h.rows() != 1 {
        return Err(shape_err!("ego query has {} rows", ego_h.rows()));
    }
    let x = ego_h.gather_rows(&[0; PLAN_MODES]).add(modes.slots);
    let trajectories = mlp_forward(tape, store, x, &params.plan)?.scale(scales.trajectory);
    let logits = mlp_forward(tape, store, x, &params.plan_class)?.reshape(&[1, PLAN_MODES]);
    Ok(PlanOutput { trajectories, logits })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn to_points(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    pub velocity: [f64; 2],
    pub logits: Vec<f64>,
}

impl BoxPrediction {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_vec(&self.logits)
    }

    /// Most likely foreground class and its probability.
    pub fn best_class(&self) -> (usize, f64) {
        let p = self.probabilities();
        let fg = &p[..p.len() - 1];
        let c = argmax(fg);
        (c, fg[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPrediction {
    /// Agent-local waypoints per mode.
    pub modes: Vec<Vec<[f64; 2]>>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolylinePrediction {
    pub points: Vec<[f64; 2]>,
    pub logits: Vec<f64>,
}

impl PolylinePrediction {
    pub fn best_class(&self) -> (usize, f64) {
        let p = softmax_vec(&self.logits);
        let fg = &p[..p.len() - 1];
        let c = argmax(fg);
        (c, fg[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPrediction {
    /// One trajectory per [`PlanMode`], in index order.
    pub modes: Vec<Vec<[f64; 2]>>,
    pub logits: Vec<f64>,
}

/// Highest-logit plan mode and its trajectory.
pub fn select_plan(plan: &PlanPrediction) -> (PlanMode, &[[f64; 2]]) {
    let m = argmax(&plan.logits);
    (PlanMode::from_index(m).expect("six plan modes"), &plan.modes[m])
}

/// Plain-value decoding of one block's heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub boxes: Vec<BoxPrediction>,
    pub motions: Vec<MotionPrediction>,
    pub map: Vec<PolylinePrediction>,
    pub plan: PlanPrediction,
}

impl<'t> LayerOutputs<'t> {
    pub fn to_predictions(&self) -> FramePredictions {
        let d = &self.detection;
        let (center, size, heading, velocity, logits) = (
            d.center.value(),
            d.size.value(),
            d.heading.value(),
            d.velocity.value(),
            d.logits.value(),
        );
        let boxes = (0..center.rows())
            .map(|i| {
                let c = center.row(i);
                let s = size.row(i);
                let h = heading.row(i);
                let v = velocity.row(i);
                BoxPrediction {
                    center: [c[0], c[1], c[2]],
                    size: [s[0], s[1], s[2]],
                    heading: h[0].atan2(h[1]),
                    velocity: [v[0], v[1]],
                    logits: logits.row(i).to_vec(),
                }
            })
            .collect();
        let m = &self.motion;
        let (traj, mlog) = (m.trajectories.value(), m.logits.value());
        let motions = (0..traj.rows())
            .map(|i| MotionPrediction {
                modes: traj.row(i).chunks_exact(2 * m.horizon).map(to_points).collect(),
                logits: mlog.row(i).to_vec(),
            })
            .collect();
        let (pts, plog) = (self.map.points.value(), self.map.logits.value());
        let map = (0..pts.rows())
            .map(|i| PolylinePrediction {
                points: to_points(pts.row(i)),
                logits: plog.row(i).to_vec(),
            })
            .collect();
        let ptraj = self.plan.trajectories.value();
        let plan = PlanPrediction {
            modes: (0..ptraj.rows()).map(|i| to_points(ptraj.row(i))).collect(),
            logits: self.plan.logits.value().data().to_vec(),
        };
        FramePredictions {
            boxes,
            motions,
            map,
            plan,
        }
    }
}

/// Agent-local waypoints mapped into the ego frame through each box's pose.
pub fn to_global_motion(motions: &[MotionPrediction], boxes: &[BoxPrediction]) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
    if motions.len() != boxes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} motions for {} boxes",
            motions.len(),
            boxes.len()
        )));
    }
    Ok(motions
        .iter()
        .zip(boxes)
        .map(|(m, b)| {
            let (s, c) = b.heading.sin_cos();
            m.modes
                .iter()
                .map(|traj| {
                    traj.iter()
                        .map(|p| [c * p[0] - s * p[1] + b.center[0], s * p[0] + c * p[1] + b.center[1]])
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// All four heads on one block's queries.
pub fn decode_layer<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    modes: &ModeEmbedding<'t>,
    params: &HeadParams,
    cfg: &ModelConfig,
) -> Result<LayerOutputs<'t>> {
    Ok(LayerOutputs {
        detection: detect(tape, store, tq.agent_h, &tq.agent_anchor, params, &cfg.scales)?,
        motion: predict_motion(tape, store, tq.agent_h, params, cfg)?,
        map: decode_map(tape, store, tq.map_h, &tq.map_anchor, params, &cfg.scales)?,
        plan: plan(tape, store, tq.ego_h, modes, params, &cfg.scales)?,
    })
}

/// Moves anchors to the block's predictions and re-encodes the PEs.
/// Embeddings are carried over unchanged.
pub fn refresh_pe<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    preds: &FramePredictions,
    params: &QueryParams,
    num_freqs: usize,
) -> Result<TaskQueries<'t>> {
    if preds.boxes.len() != tq.num_agents() || preds.map.len() != tq.num_map() {
        return Err(shape_err!("predictions do not match the query counts"));
    }
    let agent_anchor: Vec<AgentAnchor> = preds
        .boxes
        .iter()
        .map(|b| AgentAnchor {
            center: b.center,
            class_probs: b.probabilities(),
        })
        .collect();
    let map_anchor: Vec<Vec<[f64; 2]>> = preds.map.iter().map(|p| p.points.clone()).collect();
    let ego_anchor = select_plan(&preds.plan).1.to_vec();
    Ok(TaskQueries {
        agent_h: tq.agent_h,
        agent_pe: encode_agent_pe(tape, store, &agent_anchor, num_freqs, &params.agent_pe)?,
        agent_anchor,
        map_h: tq.map_h,
        map_pe: encode_map_pe(tape, store, &map_anchor, num_freqs, &params.map_pe)?,
        map_anchor,
        ego_h: tq.ego_h,
        ego_pe: encode_ego_pe(tape, store, &ego_anchor, &params.ego_pe)?,
        ego_anchor,
    })
}
