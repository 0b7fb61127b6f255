//! Scenario families and scripted agent kinematics.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use dtx_core::geometry::{wrap_angle, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::Path;
use crate::world::World;

pub const LANE_WIDTH: f64 = 3.5;
/// Frame period of the simulation, 10 Hz.
pub const FRAME_PERIOD: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 120;
pub const EGO_SIZE: [f64; 3] = [4.5, 1.9, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Straight,
    CutIn,
    EmergencyBrake,
    Merge,
    Turn,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Straight,
        Family::CutIn,
        Family::EmergencyBrake,
        Family::Merge,
        Family::Turn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Straight => "straight",
            Family::CutIn => "cut_in",
            Family::EmergencyBrake => "emergency_brake",
            Family::Merge => "merge",
            Family::Turn => "turn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

/// Index order matches the model's map class outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Centerline = 0,
    Boundary = 1,
    Crossing = 2,
}

/// Index order matches the model's agent class outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car = 0,
    Truck = 1,
    Cyclist = 2,
}

impl AgentClass {
    pub fn size(self) -> [f64; 3] {
        match self {
            AgentClass::Car => [4.5, 1.9, 1.5],
            AgentClass::Truck => [8.0, 2.5, 3.0],
            AgentClass::Cyclist => [1.8, 0.6, 1.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: MapClass,
    pub points: Vec<[f64; 2]>,
}

/// Constant speed, then optional constant deceleration to a standstill.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub initial: f64,
    pub brake_at: Option<f64>,
    pub decel: f64,
}

impl SpeedProfile {
    pub fn cruise(v: f64) -> Self {
        Self {
            initial: v,
            brake_at: None,
            decel: 0.0,
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        match self.brake_at {
            Some(tb) if t > tb => (self.initial - self.decel * (t - tb)).max(0.0),
            _ => self.initial,
        }
    }

    /// Distance covered over `[0, t]`.
    pub fn distance(&self, t: f64) -> f64 {
        match self.brake_at {
            Some(tb) if t > tb => {
                let dt = (t - tb).min(self.initial / self.decel);
                self.initial * tb + self.initial * dt - 0.5 * self.decel * dt * dt
            }
            _ => self.initial * t,
        }
    }
}

/// Lateral offset from the script path, moving from `from` to `to` along a
/// half-cosine over `[start, start + duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateralProfile {
    pub from: f64,
    pub to: f64,
    pub start: f64,
    pub duration: f64,
}

impl LateralProfile {
    pub fn constant(offset: f64) -> Self {
        Self {
            from: offset,
            to: offset,
            start: 0.0,
            duration: 1.0,
        }
    }

    pub fn offset(&self, t: f64) -> f64 {
        let u = ((t - self.start) / self.duration).clamp(0.0, 1.0);
        self.from + (self.to - self.from) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    }

    pub fn rate(&self, t: f64) -> f64 {
        let u = (t - self.start) / self.duration;
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        (self.to - self.from) * 0.5 * std::f64::consts::PI * (std::f64::consts::PI * u).sin() / self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pose: Pose2,
    pub speed: f64,
    /// World-frame velocity.
    pub velocity: [f64; 2],
}

/// Agent driving along `path` from arc length `start_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub class: AgentClass,
    pub size: [f64; 3],
    pub path: Path,
    pub start_s: f64,
    pub speed: SpeedProfile,
    pub lateral: LateralProfile,
    /// Scripted to interact with the ego route.
    pub conflict: bool,
}

impl AgentScript {
    /// Closed-form state at time `t` seconds.
    pub fn state(&self, t: f64) -> AgentState {
        let s = self.start_s + self.speed.distance(t);
        let base = self.path.point_at(s);
        let h = self.path.heading_at(s);
        let (sh, ch) = h.sin_cos();
        let lat = self.lateral.offset(t);
        let v = self.speed.speed(t);
        let vl = self.lateral.rate(t);
        let velocity = [v * ch - vl * sh, v * sh + vl * ch];
        let yaw = if v.abs() + vl.abs() > 1e-9 { wrap_angle(h + vl.atan2(v)) } else { h };
        AgentState {
            pose: Pose2::new(base[0] - sh * lat, base[1] + ch * lat, yaw),
            speed: v.hypot(vl),
            velocity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub family: Family,
    pub seed: u64,
    pub map: Vec<MapElement>,
    pub route: Path,
    pub agents: Vec<AgentScript>,
    pub ego_start: Pose2,
    pub ego_speed: f64,
    pub cruise_speed: f64,
    pub steps: usize,
    pub frame_period: f64,
    /// Route progress in metres the expert reaches by the final step.
    pub route_goal: f64,
}

impl Scenario {
    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.frame_period
    }

    /// Route progress the expert makes over the episode; fills `route_goal`.
    pub fn with_expert_goal(mut self) -> Self {
        let mut w = World::new(&self);
        while !w.done() {
            let plan = w.expert_plan(6, 0.5);
            w.step(&plan.waypoints);
        }
        self.route_goal = w.progress();
        self
    }
}

fn lane_line(y: f64) -> Vec<[f64; 2]> {
    vec![[-60.0, y], [400.0, y]]
}

fn straight_road(lanes: usize) -> Vec<MapElement> {
    let mut map = Vec::new();
    for i in 0..lanes {
        map.push(MapElement {
            class: MapClass::Centerline,
            points: lane_line(i as f64 * LANE_WIDTH),
        });
    }
    for i in 0..=lanes {
        map.push(MapElement {
            class: MapClass::Boundary,
            points: lane_line((i as f64 - 0.5) * LANE_WIDTH),
        });
    }
    map
}

fn crossing(x: f64, y0: f64, y1: f64) -> MapElement {
    MapElement {
        class: MapClass::Crossing,
        points: vec![[x, y0], [x, y1]],
    }
}

fn random_class(rng: &mut ChaCha8Rng) -> AgentClass {
    match rng.random_range(0..10) {
        0..=5 => AgentClass::Car,
        6..=7 => AgentClass::Truck,
        _ => AgentClass::Cyclist,
    }
}

fn cruiser(rng: &mut ChaCha8Rng, lane_y: f64, x: f64, speed: f64) -> AgentScript {
    let class = random_class(rng);
    let speed = if class == AgentClass::Cyclist { speed.min(4.0) } else { speed };
    AgentScript {
        class,
        size: class.size(),
        path: Path::line([-200.0, lane_y], [800.0, lane_y]),
        start_s: x + 200.0,
        speed: SpeedProfile::cruise(speed),
        lateral: LateralProfile::constant(0.0),
        conflict: false,
    }
}

/// Non-interacting traffic in lanes other than the ego lane.
fn background(rng: &mut ChaCha8Rng, lanes: &[f64], count: usize) -> Vec<AgentScript> {
    let mut out: Vec<AgentScript> = Vec::new();
    let mut tries = 0;
    while out.len() < count && tries < 100 {
        tries += 1;
        let y = lanes[rng.random_range(0..lanes.len())];
        let x = rng.random_range(-25.0..60.0);
        let v = rng.random_range(3.0..9.0);
        let a = cruiser(rng, y, x, v);
        // keep same-lane agents apart so scripts never overlap
        let clash = out.iter().any(|o| {
            (o.path.points()[0][1] - y).abs() < 0.1
                && (o.start_s - a.start_s).abs() < 12.0 + 12.0 * (o.speed.initial - a.speed.initial).abs()
        });
        if !clash {
            out.push(a);
        }
    }
    out
}

fn turn_route() -> Path {
    let (x0, r) = (40.0, 15.0);
    let mut pts = vec![[-60.0, 0.0], [x0, 0.0]];
    let n = 24;
    for k in 1..=n {
        let a = -FRAC_PI_2 + FRAC_PI_2 * k as f64 / n as f64;
        pts.push([x0 + r * a.cos(), r + r * a.sin()]);
    }
    pts.push([x0 + r, 400.0]);
    Path::new(pts).expect("turn route")
}

/// Deterministic scenario for `(family, seed)`.
pub fn generate_scenario(family: Family, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (family as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let cruise_speed = rng.random_range(7.0..9.0);
    let straight_route = Path::line([-60.0, 0.0], [400.0, 0.0]);
    let (map, route, agents) = match family {
        Family::Straight => {
            let mut map = straight_road(3);
            map.push(crossing(rng.random_range(40.0..90.0), -0.5 * LANE_WIDTH, 2.5 * LANE_WIDTH));
            let n = rng.random_range(2..=5);
            (map, straight_route, background(&mut rng, &[LANE_WIDTH, 2.0 * LANE_WIDTH], n))
        }
        Family::CutIn => {
            let map = straight_road(3);
            let conflict = AgentScript {
                class: AgentClass::Car,
                size: AgentClass::Car.size(),
                path: Path::line([-200.0, 0.0], [800.0, 0.0]),
                start_s: 200.0 + rng.random_range(12.0..18.0),
                speed: SpeedProfile::cruise(rng.random_range(5.5..7.0)),
                lateral: LateralProfile {
                    from: LANE_WIDTH,
                    to: 0.0,
                    start: rng.random_range(1.5..3.0),
                    duration: 2.5,
                },
                conflict: true,
            };
            let n = rng.random_range(1..=3);
            let mut agents = vec![conflict];
            agents.extend(background(&mut rng, &[2.0 * LANE_WIDTH], n));
            (map, straight_route, agents)
        }
        Family::EmergencyBrake => {
            let map = straight_road(3);
            let lead = AgentScript {
                class: AgentClass::Car,
                size: AgentClass::Car.size(),
                path: Path::line([-200.0, 0.0], [800.0, 0.0]),
                start_s: 200.0 + rng.random_range(18.0..25.0),
                speed: SpeedProfile {
                    initial: rng.random_range(6.0..8.0),
                    brake_at: Some(rng.random_range(3.0..5.0)),
                    decel: rng.random_range(4.0..6.0),
                },
                lateral: LateralProfile::constant(0.0),
                conflict: true,
            };
            let n = rng.random_range(1..=3);
            let mut agents = vec![lead];
            agents.extend(background(&mut rng, &[LANE_WIDTH, 2.0 * LANE_WIDTH], n));
            (map, straight_route, agents)
        }
        Family::Merge => {
            let mut map = straight_road(2);
            map.push(MapElement {
                class: MapClass::Centerline,
                points: vec![[-60.0, -LANE_WIDTH], [60.0, -LANE_WIDTH]],
            });
            map.push(MapElement {
                class: MapClass::Boundary,
                points: vec![[-60.0, -1.5 * LANE_WIDTH], [60.0, -1.5 * LANE_WIDTH], [80.0, -0.5 * LANE_WIDTH]],
            });
            let merger = AgentScript {
                class: AgentClass::Car,
                size: AgentClass::Car.size(),
                path: Path::line([-200.0, 0.0], [800.0, 0.0]),
                start_s: 200.0 + rng.random_range(12.0..18.0),
                speed: SpeedProfile::cruise(rng.random_range(5.5..7.0)),
                lateral: LateralProfile {
                    from: -LANE_WIDTH,
                    to: 0.0,
                    start: rng.random_range(1.5..3.0),
                    duration: 3.0,
                },
                conflict: true,
            };
            let n = rng.random_range(1..=2);
            let mut agents = vec![merger];
            agents.extend(background(&mut rng, &[LANE_WIDTH], n));
            (map, straight_route, agents)
        }
        Family::Turn => {
            let route = turn_route();
            let mut map = vec![
                MapElement {
                    class: MapClass::Centerline,
                    points: route.points().to_vec(),
                },
                MapElement {
                    class: MapClass::Boundary,
                    points: route.offset(0.5 * LANE_WIDTH).points().to_vec(),
                },
                MapElement {
                    class: MapClass::Boundary,
                    points: vec![[-60.0, -0.5 * LANE_WIDTH], [400.0, -0.5 * LANE_WIDTH]],
                },
                MapElement {
                    class: MapClass::Centerline,
                    points: vec![[40.0, 0.0], [400.0, 0.0]],
                },
            ];
            map.push(crossing(36.0, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH));
            let lead = AgentScript {
                class: AgentClass::Car,
                size: AgentClass::Car.size(),
                path: route.clone(),
                start_s: 60.0 + rng.random_range(18.0..24.0),
                speed: SpeedProfile::cruise(rng.random_range(4.0..5.0)),
                lateral: LateralProfile::constant(0.0),
                conflict: true,
            };
            let mut agents = vec![lead];
            if rng.random_bool(0.5) {
                // leaves along the straight road, away from the turn
                let x = rng.random_range(55.0..80.0);
                let v = rng.random_range(4.0..8.0);
                agents.push(cruiser(&mut rng, 0.0, x, v));
            }
            (map, route, agents)
        }
    };
    Scenario {
        family,
        seed,
        map,
        route,
        agents,
        ego_start: Pose2::default(),
        ego_speed: 4.0,
        cruise_speed,
        steps: DEFAULT_STEPS,
        frame_period: FRAME_PERIOD,
        route_goal: 0.0,
    }
    .with_expert_goal()
}
