//! Set matching and the per-task training objectives.

use serde::{Deserialize, Serialize};

use crate::config::{HeadScales, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::heads::{classify_mode, softmax_vec, DetectionOutput, LayerOutputs, MapOutput, MotionOutput, PlanOutput};
use crate::labels::{FrameLabels, GtBox, GtPolyline};
use crate::numerics::{concat_cols, Tape, Tensor, Var};

/// Matched `(prediction, ground truth)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub num_pred: usize,
    pub num_gt: usize,
}

impl Assignment {
    /// Ground-truth index per prediction, `None` for background.
    pub fn target_of(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.num_pred];
        for &(p, g) in &self.pairs {
            t[p] = Some(g);
        }
        t
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Minimum-cost assignment for a `rows x cols` matrix (shortest augmenting
/// paths with potentials, O(n^2 m)). Matches `min(rows, cols)` pairs.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            num_pred: rows,
            num_gt: cols,
        });
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(shape_err!("ragged cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian cost".into()));
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment {
        pairs,
        num_pred: rows,
        num_gt: cols,
    })
}

/// Task weights and classification/regression sub-weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub detection: f64,
    pub motion: f64,
    pub mapping: f64,
    pub planning: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub motion_cls: f64,
    pub motion_reg: f64,
    pub map_cls: f64,
    pub map_reg: f64,
    pub plan_cls: f64,
    pub plan_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            detection: 1.0,
            motion: 1.0,
            mapping: 1.0,
            planning: 1.0,
            det_cls: 2.0,
            det_reg: 5.0,
            motion_cls: 1.0,
            motion_reg: 1.0,
            map_cls: 2.0,
            map_reg: 5.0,
            plan_cls: 1.0,
            plan_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.detection,
            self.motion,
            self.mapping,
            self.planning,
            self.det_cls,
            self.det_reg,
            self.motion_cls,
            self.motion_reg,
            self.map_cls,
            self.map_reg,
            self.plan_cls,
            self.plan_reg,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            detection: self.detection * k,
            motion: self.motion * k,
            mapping: self.mapping * k,
            planning: self.planning * k,
            ..*self
        }
    }
}

/// `cls_weight * classification + reg_weight * regression`.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss<'t> {
    pub total: Var<'t>,
    pub classification: Var<'t>,
    pub regression: Var<'t>,
}

impl<'t> TaskLoss<'t> {
    fn combine(cls: Var<'t>, reg: Var<'t>, wc: f64, wr: f64) -> Self {
        Self {
            total: cls.scale(wc).add(reg.scale(wr)),
            classification: cls,
            regression: reg,
        }
    }
}

fn zero<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Var<'t> {
    let c = logits.cols();
    let idx: Vec<usize> = targets.iter().enumerate().map(|(r, &t)| r * c + t).collect();
    logits
        .log_softmax()
        .select(&idx)
        .sum()
        .scale(-1.0 / targets.len().max(1) as f64)
}

/// Normalized box parameters: `center/pos, size/size, sin, cos, velocity/vel`.
fn box_features(b: &GtBox, s: &HeadScales) -> [f64; 10] {
    let (sin, cos) = b.heading.sin_cos();
    [
        b.center[0] / s.position,
        b.center[1] / s.position,
        b.center[2] / s.position,
        b.size[0] / s.size,
        b.size[1] / s.size,
        b.size[2] / s.size,
        sin,
        cos,
        b.velocity[0] / s.velocity,
        b.velocity[1] / s.velocity,
    ]
}

fn predicted_box_features<'t>(det: &DetectionOutput<'t>, s: &HeadScales) -> Var<'t> {
    concat_cols(&[
        det.center.scale(1.0 / s.position),
        det.size.scale(1.0 / s.size),
        det.heading,
        det.velocity.scale(1.0 / s.velocity),
    ])
}

/// Mean |pred - gt| over the matched rows of `pred`.
fn matched_l1<'t>(pred: Var<'t>, rows: &[usize], gt: Vec<Vec<f64>>) -> Result<Var<'t>> {
    let target = pred.tape().constant(Tensor::from_rows(&gt)?);
    Ok(pred.gather_rows(rows).sub(target).abs().mean())
}

pub fn detection_loss<'t>(
    det: &DetectionOutput<'t>,
    gt: &[GtBox],
    w: &LossWeights,
    scales: &HeadScales,
) -> Result<(TaskLoss<'t>, Assignment)> {
    let tape = det.center.tape();
    let logits = det.logits.value();
    let n = logits.rows();
    let background = logits.cols() - 1;
    if let Some(b) = gt.iter().find(|b| b.class >= background) {
        return Err(Error::InvalidArgument(format!("box class {} out of range", b.class)));
    }
    let feats = predicted_box_features(det, scales);
    let fv = feats.value();
    let gt_feats: Vec<[f64; 10]> = gt.iter().map(|b| box_features(b, scales)).collect();
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let p = softmax_vec(logits.row(i));
            gt.iter()
                .zip(&gt_feats)
                .map(|(b, g)| {
                    let l1 = fv.row(i).iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
                    w.det_cls * (1.0 - p[b.class]) + w.det_reg * l1
                })
                .collect()
        })
        .collect();
    let assignment = if gt.is_empty() {
        Assignment {
            pairs: Vec::new(),
            num_pred: n,
            num_gt: 0,
        }
    } else {
        hungarian(&cost)?
    };
    let mut targets = vec![background; n];
    for &(p, g) in &assignment.pairs {
        targets[p] = gt[g].class;
    }
    let cls = cross_entropy(det.logits, &targets);
    let reg = if assignment.pairs.is_empty() {
        zero(tape)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let targets = assignment.pairs.iter().map(|p| gt_feats[p.1].to_vec()).collect();
        matched_l1(feats, &rows, targets)?
    };
    Ok((TaskLoss::combine(cls, reg, w.det_cls, w.det_reg), assignment))
}

/// Mode with the smallest final-waypoint distance; ties to the lowest index.
pub fn winner_mode(modes: &[&[f64]], gt: &[f64]) -> usize {
    let n = gt.len();
    let dist = |m: &[f64]| (m[n - 2] - gt[n - 2]).hypot(m[n - 1] - gt[n - 1]);
    let mut best = 0;
    for (i, m) in modes.iter().enumerate() {
        if dist(m) < dist(modes[best]) {
            best = i;
        }
    }
    best
}

/// Winner-take-all loss on agent-local trajectories of matched agents. Uses
/// only the motion head and the assignment.
pub fn motion_wta_loss<'t>(
    motion: &MotionOutput<'t>,
    gt: &[GtBox],
    assignment: &Assignment,
    w: &LossWeights,
    scales: &HeadScales,
) -> Result<TaskLoss<'t>> {
    let tape = motion.trajectories.tape();
    let (m, h) = (motion.modes, motion.horizon);
    let pairs: Vec<(usize, usize)> = assignment
        .pairs
        .iter()
        .copied()
        .filter(|&(_, g)| gt[g].future.len() == h)
        .collect();
    if pairs.is_empty() {
        return Ok(TaskLoss::combine(zero(tape), zero(tape), w.motion_cls, w.motion_reg));
    }
    let traj = motion.trajectories.value();
    let width = 2 * h;
    let mut flat_idx = Vec::with_capacity(pairs.len() * width);
    let mut target = Vec::with_capacity(pairs.len() * width);
    let mut winners = Vec::with_capacity(pairs.len());
    for &(p, g) in &pairs {
        let gt_flat: Vec<f64> = gt[g].future.iter().flatten().copied().collect();
        let row = traj.row(p);
        let modes: Vec<&[f64]> = row.chunks_exact(width).collect();
        let k = winner_mode(&modes, &gt_flat);
        winners.push(k);
        let base = p * m * width + k * width;
        flat_idx.extend(base..base + width);
        target.extend(gt_flat.iter().map(|v| v / scales.trajectory));
    }
    let n = flat_idx.len();
    let picked = motion.trajectories.select(&flat_idx).scale(1.0 / scales.trajectory);
    let reg = picked
        .sub(tape.constant(Tensor::vector(target)))
        .abs()
        .sum()
        .scale(1.0 / n as f64);
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let cls = cross_entropy(motion.logits.gather_rows(&rows), &winners);
    Ok(TaskLoss::combine(cls, reg, w.motion_cls, w.motion_reg))
}

/// Mean point distance (L1) in normalized units, forward and reversed.
fn polyline_l1(pred: &[f64], gt: &[[f64; 2]], scale: f64) -> (f64, f64) {
    let n = gt.len();
    let mut fwd = 0.0;
    let mut rev = 0.0;
    for (k, g) in gt.iter().enumerate() {
        let r = &gt[n - 1 - k];
        fwd += (pred[2 * k] - g[0]).abs() + (pred[2 * k + 1] - g[1]).abs();
        rev += (pred[2 * k] - r[0]).abs() + (pred[2 * k + 1] - r[1]).abs();
    }
    let d = (2 * n) as f64 * scale;
    (fwd / d, rev / d)
}

pub fn map_loss<'t>(map: &MapOutput<'t>, gt: &[GtPolyline], w: &LossWeights, scales: &HeadScales) -> Result<TaskLoss<'t>> {
    let tape = map.points.tape();
    let pts = map.points.value();
    let logits = map.logits.value();
    let n = pts.rows();
    let np = pts.cols() / 2;
    let background = logits.cols() - 1;
    if let Some(g) = gt.iter().find(|g| g.points.len() != np || g.class >= background) {
        return Err(Error::InvalidArgument(format!(
            "polyline with {} points and class {} vs {np} points, {background} classes",
            g.points.len(),
            g.class
        )));
    }
    let dirs: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| gt.iter().map(|g| polyline_l1(pts.row(i), &g.points, scales.position)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let p = softmax_vec(logits.row(i));
            gt.iter()
                .enumerate()
                .map(|(j, g)| {
                    let (f, r) = dirs[i][j];
                    w.map_cls * (1.0 - p[g.class]) + w.map_reg * f.min(r)
                })
                .collect()
        })
        .collect();
    let assignment = if gt.is_empty() {
        Assignment::default()
    } else {
        hungarian(&cost)?
    };
    let mut targets = vec![background; n];
    for &(p, g) in &assignment.pairs {
        targets[p] = gt[g].class;
    }
    let cls = cross_entropy(map.logits, &targets);
    let reg = if assignment.pairs.is_empty() {
        zero(tape)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let target = assignment
            .pairs
            .iter()
            .map(|&(p, g)| {
                let (f, r) = dirs[p][g];
                let poly = if r < f { gt[g].reversed() } else { gt[g].clone() };
                poly.points.iter().flatten().map(|v| v / scales.position).collect()
            })
            .collect();
        matched_l1(map.points.scale(1.0 / scales.position), &rows, target)?
    };
    Ok(TaskLoss::combine(cls, reg, w.map_cls, w.map_reg))
}

/// Regression on the ground-truth mode's trajectory plus mode classification.
pub fn planning_loss<'t>(plan: &PlanOutput<'t>, gt: &[[f64; 2]], w: &LossWeights, cfg: &ModelConfig) -> Result<TaskLoss<'t>> {
    let width = plan.trajectories.cols();
    if gt.len() * 2 != width {
        return Err(shape_err!("{} ground-truth waypoints for a {}-value plan", gt.len(), width));
    }
    let tape = plan.trajectories.tape();
    let mode = classify_mode(gt, &cfg.modes).index();
    let s = cfg.scales.trajectory;
    let target: Vec<f64> = gt.iter().flatten().map(|v| v / s).collect();
    let reg = plan
        .trajectories
        .slice_rows(mode, 1)
        .scale(1.0 / s)
        .sub(tape.constant(Tensor::matrix(1, width, target)?))
        .abs()
        .mean();
    let cls = cross_entropy(plan.logits, &[mode]);
    Ok(TaskLoss::combine(cls, reg, w.plan_cls, w.plan_reg))
}

/// Per-term values of one loss evaluation, averaged over blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub detection: f64,
    pub motion: f64,
    pub mapping: f64,
    pub planning: f64,
    pub map_regression: f64,
    pub total: f64,
}

impl LossValues {
    pub const CSV_HEADER: &'static str = "step,L_det,L_motion,L_map,L_plan,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.detection, self.motion, self.mapping, self.planning, self.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    /// Weighted task terms, averaged over blocks.
    pub values: LossValues,
    pub assignments: Vec<Assignment>,
}

/// Deep-supervised objective: the weighted task sum averaged over blocks.
pub fn total_loss<'t>(
    layers: &[LayerOutputs<'t>],
    labels: &FrameLabels,
    w: &LossWeights,
    cfg: &ModelConfig,
) -> Result<TotalLoss<'t>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("total loss over zero blocks".into()));
    }
    let k = 1.0 / layers.len() as f64;
    let mut terms = Vec::with_capacity(layers.len());
    let mut values = LossValues::default();
    let mut assignments = Vec::with_capacity(layers.len());
    for layer in layers {
        let (det, asg) = detection_loss(&layer.detection, &labels.boxes, w, &cfg.scales)?;
        let mot = motion_wta_loss(&layer.motion, &labels.boxes, &asg, w, &cfg.scales)?;
        let map = map_loss(&layer.map, &labels.polylines, w, &cfg.scales)?;
        let plan = planning_loss(&layer.plan, &labels.ego_future, w, cfg)?;
        let sum = det
            .total
            .scale(w.detection)
            .add(mot.total.scale(w.motion))
            .add(map.total.scale(w.mapping))
            .add(plan.total.scale(w.planning));
        values.detection += k * w.detection * det.total.item();
        values.motion += k * w.motion * mot.total.item();
        values.mapping += k * w.mapping * map.total.item();
        values.planning += k * w.planning * plan.total.item();
        values.map_regression += k * map.regression.item();
        terms.push(sum);
        assignments.push(asg);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t);
    }
    let total = total.scale(k);
    values.total = total.item();
    Ok(TotalLoss {
        total,
        values,
        assignments,
    })
}
