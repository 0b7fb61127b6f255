//! Ego dynamics and closed-loop stepping.

use dtx_core::geometry::{wrap_angle, Pose2};
use serde::{Deserialize, Serialize};

use crate::expert::{expert_plan, ExpertPlan};
use crate::scenario::{AgentState, Scenario, EGO_SIZE};

pub const WHEELBASE: f64 = 2.7;
pub const MAX_ACCEL: f64 = 4.0;
pub const MAX_DECEL: f64 = 8.0;
pub const MAX_STEER: f64 = 0.6;
/// Lateral distance from the route beyond which the ego counts as off-route.
pub const OFF_ROUTE_DISTANCE: f64 = 2.5;
/// Spacing of the planned waypoints the tracker consumes.
pub const PLAN_DT: f64 = 0.5;

/// Kinematic bicycle state; `pose` is the reference point of the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose2,
    pub speed: f64,
    /// Last applied steering angle and acceleration.
    pub steer: f64,
    pub accel: f64,
}

impl EgoState {
    /// Integrates `dt` seconds under constant acceleration and steering.
    /// The heading change is exact for the travelled arc; speed never goes
    /// negative.
    pub fn advance(&mut self, accel: f64, steer: f64, dt: f64) {
        let v0 = self.speed;
        let (v1, ds) = if v0 + accel * dt < 0.0 {
            (0.0, if accel < 0.0 { v0 * v0 / (-2.0 * accel) } else { 0.0 })
        } else {
            (v0 + accel * dt, (v0 + 0.5 * accel * dt) * dt)
        };
        let kappa = steer.tan() / WHEELBASE;
        let yaw0 = self.pose.yaw;
        let dyaw = kappa * ds;
        let (x, y) = if kappa.abs() < 1e-12 {
            (ds * yaw0.cos(), ds * yaw0.sin())
        } else {
            (
                ((yaw0 + dyaw).sin() - yaw0.sin()) / kappa,
                (yaw0.cos() - (yaw0 + dyaw).cos()) / kappa,
            )
        };
        self.pose = Pose2::new(self.pose.x + x, self.pose.y + y, wrap_angle(yaw0 + dyaw));
        self.speed = v1;
        self.steer = steer;
        self.accel = accel;
    }

    pub fn yaw_rate(&self) -> f64 {
        self.speed * self.steer.tan() / WHEELBASE
    }
}

/// Point at arc length `dist` along `origin -> points`, or the last point.
fn along(points: &[[f64; 2]], dist: f64) -> [f64; 2] {
    let mut prev = [0.0, 0.0];
    let mut left = dist;
    for &p in points {
        let seg = (p[0] - prev[0]).hypot(p[1] - prev[1]);
        if seg >= left && seg > 0.0 {
            let u = left / seg;
            return [prev[0] + u * (p[0] - prev[0]), prev[1] + u * (p[1] - prev[1])];
        }
        left -= seg;
        prev = p;
    }
    prev
}

fn path_length(points: &[[f64; 2]]) -> f64 {
    let mut prev = [0.0, 0.0];
    let mut len = 0.0;
    for &p in points {
        len += (p[0] - prev[0]).hypot(p[1] - prev[1]);
        prev = p;
    }
    len
}

/// A first waypoint closer than this is a request to stand still.
pub const HOLD_DISTANCE: f64 = 0.1;

/// Tracker command `(accel, steer)` for ego-frame waypoints spaced
/// [`PLAN_DT`] apart. Speed follows the constant acceleration that reaches
/// the first waypoint's distance; steering is pure pursuit on the plan path.
pub fn track(plan: &[[f64; 2]], speed: f64) -> (f64, f64) {
    if plan.is_empty() {
        return (-MAX_DECEL, 0.0);
    }
    let d0 = plan[0][0].hypot(plan[0][1]);
    if d0 < HOLD_DISTANCE {
        return (-MAX_DECEL, 0.0);
    }
    let accel = (2.0 * (d0 - speed * PLAN_DT) / (PLAN_DT * PLAN_DT)).clamp(-MAX_DECEL, MAX_ACCEL);
    let total = path_length(plan);
    if total < 0.5 {
        return (accel, 0.0);
    }
    let lookahead = (2.0 + 0.8 * speed).clamp(3.0, 15.0).min(total);
    let target = along(plan, lookahead);
    let l2 = target[0] * target[0] + target[1] * target[1];
    let steer = (2.0 * WHEELBASE * target[1] / l2).atan().clamp(-MAX_STEER, MAX_STEER);
    (accel, steer)
}

/// Oriented-rectangle overlap by separating axes.
pub fn boxes_overlap(a: &Pose2, a_size: [f64; 2], b: &Pose2, b_size: [f64; 2]) -> bool {
    let corners = |p: &Pose2, s: [f64; 2]| {
        [[0.5, 0.5], [0.5, -0.5], [-0.5, -0.5], [-0.5, 0.5]].map(|[u, v]| p.to_parent([u * s[0], v * s[1]]))
    };
    let (ca, cb) = (corners(a, a_size), corners(b, b_size));
    for yaw in [a.yaw, b.yaw] {
        for axis in [[yaw.cos(), yaw.sin()], [-yaw.sin(), yaw.cos()]] {
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p[0] * axis[0] + p[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let ((alo, ahi), (blo, bhi)) = (proj(&ca), proj(&cb));
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

/// Closed-loop episode state. Agents are evaluated from their scripts, the
/// ego is integrated from tracker commands.
#[derive(Clone, Debug)]
pub struct World<'a> {
    pub scenario: &'a Scenario,
    pub step: usize,
    pub ego: EgoState,
    pub collisions: usize,
    pub off_route_events: usize,
    contact: Vec<bool>,
    off_route: bool,
    start_s: f64,
}

impl<'a> World<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let ego = EgoState {
            pose: scenario.ego_start,
            speed: scenario.ego_speed,
            steer: 0.0,
            accel: 0.0,
        };
        let start_s = scenario.route.project([ego.pose.x, ego.pose.y]).0;
        let mut w = Self {
            scenario,
            step: 0,
            ego,
            collisions: 0,
            off_route_events: 0,
            contact: vec![false; scenario.agents.len()],
            off_route: false,
            start_s,
        };
        w.update_events();
        w
    }

    pub fn time(&self) -> f64 {
        self.scenario.time(self.step)
    }

    pub fn done(&self) -> bool {
        self.step + 1 >= self.scenario.steps
    }

    pub fn agents(&self) -> Vec<AgentState> {
        let t = self.time();
        self.scenario.agents.iter().map(|a| a.state(t)).collect()
    }

    /// Route progress in metres since the episode start.
    pub fn progress(&self) -> f64 {
        self.scenario.route.project([self.ego.pose.x, self.ego.pose.y]).0 - self.start_s
    }

    /// Fraction of the expert's route progress, clamped to `[0, 1]`.
    pub fn completion(&self) -> f64 {
        if self.scenario.route_goal <= 0.0 {
            return 1.0;
        }
        (self.progress() / self.scenario.route_goal).clamp(0.0, 1.0)
    }

    pub fn expert_plan(&self, horizon: usize, dt: f64) -> ExpertPlan {
        expert_plan(self.scenario, self.time(), &self.ego, horizon, dt)
    }

    /// Advances one frame following `plan` (ego-frame waypoints at
    /// [`PLAN_DT`] spacing). No-op once the episode is done.
    pub fn step(&mut self, plan: &[[f64; 2]]) {
        if self.done() {
            return;
        }
        let (accel, steer) = track(plan, self.ego.speed);
        self.ego.advance(accel, steer, self.scenario.frame_period);
        self.step += 1;
        self.update_events();
    }

    fn update_events(&mut self) {
        let t = self.time();
        let ego_size = [EGO_SIZE[0], EGO_SIZE[1]];
        for (i, a) in self.scenario.agents.iter().enumerate() {
            let s = a.state(t);
            let hit = boxes_overlap(&self.ego.pose, ego_size, &s.pose, [a.size[0], a.size[1]]);
            if hit && !self.contact[i] {
                self.collisions += 1;
            }
            self.contact[i] = hit;
        }
        let lateral = self.scenario.route.project([self.ego.pose.x, self.ego.pose.y]).1;
        let off = lateral.abs() > OFF_ROUTE_DISTANCE;
        if off && !self.off_route {
            self.off_route_events += 1;
        }
        self.off_route = off;
    }
}
