//! Open-loop metrics: greedy-matched average precision, best-of-modes
//! forecasting errors, planning L2 and planned-path collisions.

use dtx_core::heads::{
    classify_mode, select_plan, to_global_motion, BoxPrediction, FramePredictions, MotionPrediction, PlanPrediction,
    PolylinePrediction,
};
use dtx_core::labels::{FrameLabels, GtBox};
use dtx_core::ModelConfig;
use dtx_simworld::world::boxes_overlap;
use dtx_core::geometry::Pose2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-distance thresholds of detection AP, metres.
pub const DET_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Chamfer thresholds of map AP, metres.
pub const MAP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
/// Final displacement beyond which a forecast counts as a miss.
pub const MISS_THRESHOLD: f64 = 2.0;
/// Detection threshold used to pair forecasts with ground truth.
pub const MOTION_MATCH_THRESHOLD: f64 = 2.0;

/// One scored prediction of `class` in `frame`; `index` identifies it to
/// the distance function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub frame: usize,
    pub class: usize,
    pub index: usize,
}

/// Greedy matching in descending score order: each prediction takes the
/// nearest unmatched target of its frame and class within `threshold`.
/// Returns matched `(prediction, target)` index pairs and the per-prediction
/// true-positive flags in ranked order.
pub fn greedy_match(
    preds: &[Scored],
    targets: &[Target],
    threshold: f64,
    dist: impl Fn(usize, usize) -> f64,
) -> (Vec<(usize, usize)>, Vec<(usize, bool)>) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; targets.len()];
    let mut pairs = Vec::new();
    let mut ranked = Vec::with_capacity(preds.len());
    for i in order {
        let p = preds[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, t) in targets.iter().enumerate() {
            if taken[j] || t.frame != p.frame || t.class != p.class {
                continue;
            }
            let d = dist(p.index, t.index);
            if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[j] = true;
                pairs.push((p.index, targets[j].index));
                ranked.push((p.class, true));
            }
            None => ranked.push((p.class, false)),
        }
    }
    (pairs, ranked)
}

/// All-point interpolated average precision of one ranked list against
/// `positives` targets.
pub fn average_precision(ranked_tp: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right, then area over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    for (k, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    ap
}

/// Mean over classes present in `targets` of the per-class AP at
/// `threshold`. Zero when there are no targets.
pub fn mean_ap(preds: &[Scored], targets: &[Target], threshold: f64, dist: impl Fn(usize, usize) -> f64) -> f64 {
    let (_, ranked) = greedy_match(preds, targets, threshold, dist);
    let mut classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| {
            let hits: Vec<bool> = ranked.iter().filter(|(k, _)| *k == c).map(|(_, h)| *h).collect();
            average_precision(&hits, targets.iter().filter(|t| t.class == c).count())
        })
        .sum();
    sum / classes.len() as f64
}

/// Symmetric mean nearest-point distance.
pub fn chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let one_way = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

/// `(ADE, FDE)` of one trajectory against another of equal length.
pub fn displacement(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> (f64, f64) {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).collect();
    (d.iter().sum::<f64>() / d.len() as f64, *d.last().unwrap_or(&0.0))
}

/// Ground-truth future in the ego frame.
pub fn gt_future_ego(b: &GtBox) -> Vec<[f64; 2]> {
    let pose = Pose2::new(b.center[0], b.center[1], b.heading);
    b.future.iter().map(|&p| pose.to_parent(p)).collect()
}

/// Whether the ego box following `plan` overlaps any agent moving along its
/// ground-truth future at the same waypoint index.
pub fn plan_collides(plan: &[[f64; 2]], boxes: &[GtBox], ego_size: [f64; 2]) -> bool {
    let futures: Vec<Vec<[f64; 2]>> = boxes.iter().map(gt_future_ego).collect();
    let mut prev = [0.0, 0.0];
    let mut ego_yaw = 0.0;
    for (k, &p) in plan.iter().enumerate() {
        if (p[0] - prev[0]).hypot(p[1] - prev[1]) > 1e-6 {
            ego_yaw = (p[1] - prev[1]).atan2(p[0] - prev[0]);
        }
        let ego = Pose2::new(p[0], p[1], ego_yaw);
        for (b, fut) in boxes.iter().zip(&futures) {
            let Some(&q) = fut.get(k) else { continue };
            let from = if k == 0 { [b.center[0], b.center[1]] } else { fut[k - 1] };
            let yaw = if (q[0] - from[0]).hypot(q[1] - from[1]) > 1e-6 {
                (q[1] - from[1]).atan2(q[0] - from[0])
            } else {
                b.heading
            };
            if boxes_overlap(&ego, ego_size, &Pose2::new(q[0], q[1], yaw), [b.size[0], b.size[1]]) {
                return true;
            }
        }
        prev = p;
    }
    false
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub frames: usize,
    /// Detection mAP at each of [`DET_THRESHOLDS`].
    pub det_ap: [f64; 4],
    /// Map mAP averaged over [`MAP_THRESHOLDS`].
    pub map_ap: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// Forecasts evaluated (detections matched at 2 m).
    pub motion_matches: usize,
    /// Mean waypoint L2 of the selected plan.
    pub plan_l2: f64,
    /// Fraction of frames whose selected plan collides.
    pub collision_rate: f64,
}

/// Metrics of `preds[i]` against `labels[i]`; all frames are pooled.
pub fn open_loop_metrics(preds: &[FramePredictions], labels: &[FrameLabels]) -> Result<OpenLoopMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction frames for {} label frames",
            preds.len(),
            labels.len()
        )));
    }
    for (f, (p, l)) in preds.iter().zip(labels).enumerate() {
        let plan_len = p.plan.modes.first().map_or(0, |m| m.len());
        if plan_len != l.ego_future.len() {
            return Err(Error::HorizonMismatch(format!(
                "frame {f}: plan has {plan_len} waypoints, label {}",
                l.ego_future.len()
            )));
        }
        let motion_len = p.motions.first().and_then(|m| m.modes.first()).map(|m| m.len());
        if let (Some(n), Some(b)) = (motion_len, l.boxes.first()) {
            if n != b.future.len() {
                return Err(Error::HorizonMismatch(format!(
                    "frame {f}: forecasts have {n} waypoints, label {}",
                    b.future.len()
                )));
            }
        }
    }

    // detection: flatten boxes over frames
    let mut det_preds = Vec::new();
    let mut det_xy = Vec::new();
    for (f, p) in preds.iter().enumerate() {
        for (i, b) in p.boxes.iter().enumerate() {
            let (class, score) = b.best_class();
            det_preds.push(Scored {
                frame: f,
                class,
                score,
                index: det_xy.len(),
            });
            det_xy.push(([b.center[0], b.center[1]], f, i));
        }
    }
    let mut det_targets = Vec::new();
    let mut gt_xy = Vec::new();
    for (f, l) in labels.iter().enumerate() {
        for (i, b) in l.boxes.iter().enumerate() {
            det_targets.push(Target {
                frame: f,
                class: b.class,
                index: gt_xy.len(),
            });
            gt_xy.push(([b.center[0], b.center[1]], f, i));
        }
    }
    let center_dist = |i: usize, j: usize| {
        let (a, b) = (det_xy[i].0, gt_xy[j].0);
        (a[0] - b[0]).hypot(a[1] - b[1])
    };
    let mut det_ap = [0.0; 4];
    for (k, &th) in DET_THRESHOLDS.iter().enumerate() {
        det_ap[k] = mean_ap(&det_preds, &det_targets, th, center_dist);
    }

    // forecasting on detections matched at 2 m
    let (pairs, _) = greedy_match(&det_preds, &det_targets, MOTION_MATCH_THRESHOLD, center_dist);
    let (mut ade, mut fde, mut miss) = (0.0, 0.0, 0usize);
    for &(pi, ti) in &pairs {
        let (_, f, i) = det_xy[pi];
        let (_, gf, gi) = gt_xy[ti];
        let p = &preds[f];
        let global = to_global_motion(std::slice::from_ref(&p.motions[i]), std::slice::from_ref(&p.boxes[i]))?;
        let gt = gt_future_ego(&labels[gf].boxes[gi]);
        let (mut best_ade, mut best_fde) = (f64::INFINITY, f64::INFINITY);
        for mode in &global[0] {
            let (a, d) = displacement(mode, &gt);
            best_ade = best_ade.min(a);
            best_fde = best_fde.min(d);
        }
        ade += best_ade;
        fde += best_fde;
        miss += (best_fde > MISS_THRESHOLD) as usize;
    }
    let n_pairs = pairs.len().max(1) as f64;

    // map: chamfer AP averaged over thresholds
    let mut map_preds = Vec::new();
    let mut map_pts: Vec<&[[f64; 2]]> = Vec::new();
    for (f, p) in preds.iter().enumerate() {
        for m in &p.map {
            let (class, score) = m.best_class();
            map_preds.push(Scored {
                frame: f,
                class,
                score,
                index: map_pts.len(),
            });
            map_pts.push(&m.points);
        }
    }
    let mut map_targets = Vec::new();
    let mut gt_pts: Vec<&[[f64; 2]]> = Vec::new();
    for (f, l) in labels.iter().enumerate() {
        for pl in &l.polylines {
            map_targets.push(Target {
                frame: f,
                class: pl.class,
                index: gt_pts.len(),
            });
            gt_pts.push(&pl.points);
        }
    }
    let chamfer_dist = |i: usize, j: usize| chamfer(map_pts[i], gt_pts[j]);
    let map_ap = MAP_THRESHOLDS
        .iter()
        .map(|&th| mean_ap(&map_preds, &map_targets, th, chamfer_dist))
        .sum::<f64>()
        / MAP_THRESHOLDS.len() as f64;

    // planning
    let ego_size = [dtx_simworld::scenario::EGO_SIZE[0], dtx_simworld::scenario::EGO_SIZE[1]];
    let (mut l2, mut collisions) = (0.0, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        let (_, traj) = select_plan(&p.plan);
        l2 += displacement(traj, &l.ego_future).0;
        collisions += plan_collides(traj, &l.boxes, ego_size) as usize;
    }
    let frames = preds.len();
    let nf = frames.max(1) as f64;
    Ok(OpenLoopMetrics {
        frames,
        det_ap,
        map_ap,
        min_ade: ade / n_pairs,
        min_fde: fde / n_pairs,
        miss_rate: miss as f64 / n_pairs,
        motion_matches: pairs.len(),
        plan_l2: l2 / nf,
        collision_rate: collisions as f64 / nf,
    })
}

/// Logit given to the labelled class by [`oracle_predictions`].
const ORACLE_LOGIT: f64 = 20.0;

fn one_hot_logits(classes: usize, hot: usize) -> Vec<f64> {
    (0..classes).map(|c| if c == hot { ORACLE_LOGIT } else { 0.0 }).collect()
}

/// Predictions that reproduce `labels` exactly: one box per ground-truth
/// agent, every forecast and plan mode equal to the labelled future.
pub fn oracle_predictions(labels: &FrameLabels, cfg: &ModelConfig) -> FramePredictions {
    let boxes = labels
        .boxes
        .iter()
        .map(|b| BoxPrediction {
            center: b.center,
            size: b.size,
            heading: b.heading,
            velocity: b.velocity,
            logits: one_hot_logits(cfg.agent_classes + 1, b.class),
        })
        .collect();
    let motions = labels
        .boxes
        .iter()
        .map(|b| MotionPrediction {
            modes: vec![b.future.clone(); cfg.motion_modes],
            logits: vec![0.0; cfg.motion_modes],
        })
        .collect();
    let map = labels
        .polylines
        .iter()
        .map(|p| PolylinePrediction {
            points: p.points.clone(),
            logits: one_hot_logits(cfg.map_classes + 1, p.class),
        })
        .collect();
    let mode = classify_mode(&labels.ego_future, &cfg.modes);
    let plan = PlanPrediction {
        modes: vec![labels.ego_future.clone(); dtx_core::config::PLAN_MODES],
        logits: one_hot_logits(dtx_core::config::PLAN_MODES, mode.index()),
    };
    FramePredictions {
        boxes,
        motions,
        map,
        plan,
    }
}
