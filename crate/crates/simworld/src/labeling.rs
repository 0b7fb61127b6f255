//! Ground truth in the current ego frame.

use dtx_core::geometry::wrap_angle;
use dtx_core::labels::{FrameLabels, GtBox, GtPolyline};
use dtx_core::ModelConfig;

use crate::expert::expert_plan;
use crate::path::{clip_to_box, resample, Path};
use crate::scenario::Scenario;
use crate::world::EgoState;

/// Clipped map pieces shorter than this are dropped.
pub const MIN_POLYLINE_LENGTH: f64 = 1.0;

/// Labels for `step` with the ego in state `ego`. Boxes and polylines are in
/// the ego frame, agent futures in each agent's own frame at `step`.
pub fn label_frame(scn: &Scenario, step: usize, ego: &EgoState, cfg: &ModelConfig) -> FrameLabels {
    let t = scn.time(step);
    let pose = ego.pose;
    let (se, ce) = pose.yaw.sin_cos();
    let range = &cfg.perception;
    let mut boxes = Vec::new();
    for a in &scn.agents {
        let st = a.state(t);
        let [x, y] = pose.to_local([st.pose.x, st.pose.y]);
        let center = [x, y, 0.5 * a.size[2]];
        if !range.contains(&center) {
            continue;
        }
        let future = (1..=cfg.motion_horizon)
            .map(|k| {
                let f = a.state(t + k as f64 * cfg.waypoint_dt);
                st.pose.to_local([f.pose.x, f.pose.y])
            })
            .collect();
        boxes.push(GtBox {
            center,
            size: a.size,
            heading: wrap_angle(st.pose.yaw - pose.yaw),
            velocity: [
                ce * st.velocity[0] + se * st.velocity[1],
                -se * st.velocity[0] + ce * st.velocity[1],
            ],
            class: a.class as usize,
            future,
        });
    }
    let lo = [range.x.0, range.y.0];
    let hi = [range.x.1, range.y.1];
    let mut polylines = Vec::new();
    for el in &scn.map {
        let local: Vec<[f64; 2]> = el.points.iter().map(|&p| pose.to_local(p)).collect();
        for piece in clip_to_box(&local, lo, hi) {
            let long_enough = Path::new(piece.clone()).is_ok_and(|p| p.length() >= MIN_POLYLINE_LENGTH);
            if let (true, Some(points)) = (long_enough, resample(&piece, cfg.points_per_polyline)) {
                polylines.push(GtPolyline {
                    points,
                    class: el.class as usize,
                });
            }
        }
    }
    let plan = expert_plan(scn, t, ego, cfg.plan_horizon, cfg.waypoint_dt);
    FrameLabels {
        step: step as i64,
        boxes,
        polylines,
        ego_future: plan.waypoints,
        canbus: plan.canbus,
        ego_pose: pose,
    }
}
