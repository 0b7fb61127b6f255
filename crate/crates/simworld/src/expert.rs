//! Rule-based expert: route following with an intelligent-driver speed law.

use dtx_core::config::ModeThresholds;
use dtx_core::heads::{classify_mode, PlanMode};
use dtx_core::tokenizer::CanbusState;

use crate::scenario::{Scenario, EGO_SIZE};
use crate::world::{EgoState, MAX_ACCEL, MAX_DECEL};

/// Minimum standstill gap, metres.
pub const MIN_GAP: f64 = 4.0;
/// Desired time headway, seconds.
pub const TIME_HEADWAY: f64 = 1.5;
const COMFORT_ACCEL: f64 = 2.0;
const COMFORT_DECEL: f64 = 3.0;
const LATERAL_ACCEL: f64 = 2.0;
/// Agents closer than this to the route centerline occupy the ego lane.
const LANE_HALF_WIDTH: f64 = 2.2;
const SUBSTEP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPlan {
    /// Ego-frame waypoints at the requested spacing.
    pub waypoints: Vec<[f64; 2]>,
    pub canbus: CanbusState,
}

/// Speed cap from upcoming route curvature, reachable with comfortable
/// deceleration.
fn curve_limit(scn: &Scenario, s: f64) -> f64 {
    let mut v = scn.cruise_speed;
    let mut d = 0.0;
    while d <= 40.0 {
        let k = scn.route.curvature_at(s + d).abs();
        if k > 1e-6 {
            let vl = (LATERAL_ACCEL / k).sqrt();
            v = v.min((vl * vl + 2.0 * COMFORT_DECEL * d).sqrt());
        }
        d += 2.0;
    }
    v
}

/// `(gap, lead speed)` of the nearest in-lane agent ahead at time `t`.
fn lead(scn: &Scenario, t: f64, s_ego: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for a in &scn.agents {
        let st = a.state(t);
        let (s, lat) = scn.route.project([st.pose.x, st.pose.y]);
        if lat.abs() > LANE_HALF_WIDTH || s <= s_ego || s - s_ego > 80.0 {
            continue;
        }
        let gap = s - s_ego - 0.5 * (EGO_SIZE[0] + a.size[0]);
        let h = scn.route.heading_at(s);
        let v = st.velocity[0] * h.cos() + st.velocity[1] * h.sin();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, v));
        }
    }
    best
}

fn idm_accel(v: f64, v0: f64, lead: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v0.max(0.1)).powi(4);
    let interact = lead.map_or(0.0, |(gap, vl)| {
        let dv = v - vl;
        let star = MIN_GAP + (v * TIME_HEADWAY + v * dv / (2.0 * (COMFORT_ACCEL * COMFORT_DECEL).sqrt())).max(0.0);
        (star / gap.max(0.1)).powi(2)
    });
    (COMFORT_ACCEL * (free - interact)).clamp(-MAX_DECEL, MAX_ACCEL)
}

/// Expert waypoints for the ego at time `t`: positions on the route at the
/// distances an intelligent-driver rollout covers, with agents predicted from
/// their scripts.
pub fn expert_plan(scn: &Scenario, t: f64, ego: &EgoState, horizon: usize, dt: f64) -> ExpertPlan {
    let (s0, _) = scn.route.project([ego.pose.x, ego.pose.y]);
    let per = (dt / SUBSTEP).round().max(1.0) as usize;
    let h = dt / per as f64;
    let (mut s, mut v) = (s0, ego.speed);
    let mut waypoints = Vec::with_capacity(horizon);
    for k in 0..horizon * per {
        let tk = t + k as f64 * h;
        let a = idm_accel(v, curve_limit(scn, s), lead(scn, tk, s));
        let v1 = v + a * h;
        if v1 < 0.0 {
            s += v * v / (-2.0 * a);
            v = 0.0;
        } else {
            s += (v + 0.5 * a * h) * h;
            v = v1;
        }
        if (k + 1) % per == 0 {
            waypoints.push(ego.pose.to_local(scn.route.point_at(s)));
        }
    }
    let ahead: Vec<[f64; 2]> = (1..=6).map(|k| ego.pose.to_local(scn.route.point_at(s0 + 5.0 * k as f64))).collect();
    let mut command = classify_mode(&ahead, &ModeThresholds::default());
    if command == PlanMode::Stop {
        command = PlanMode::Straight;
    }
    ExpertPlan {
        waypoints,
        canbus: CanbusState {
            speed: ego.speed,
            yaw_rate: ego.yaw_rate(),
            steer: ego.steer,
            throttle: (ego.accel.max(0.0) / MAX_ACCEL).min(1.0),
            brake: ((-ego.accel).max(0.0) / MAX_DECEL).min(1.0),
            command,
        },
    }
}
