use std::f64::consts::PI;

use dtx_core::geometry::{CameraModel, Pose2};
use dtx_core::heads::{classify_mode, PlanMode};
use dtx_core::{ModelConfig, Preset};
use dtx_simworld::dataset::expert_rollout;
use dtx_simworld::io::{read_image, read_jsonl, write_image, write_jsonl};
use dtx_simworld::path::Path;
use dtx_simworld::render::{agent_color, background};
use dtx_simworld::scenario::{LateralProfile, SpeedProfile, FRAME_PERIOD};
use dtx_simworld::world::PLAN_DT;
use dtx_simworld::*;
use nalgebra::Vector3;
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig::desk(Preset::Small)
}

fn empty_world(steps: usize, speed: f64) -> Scenario {
    Scenario {
        family: Family::Straight,
        seed: 0,
        map: vec![],
        route: Path::line([-100.0, 0.0], [1000.0, 0.0]),
        agents: vec![],
        ego_start: Pose2::default(),
        ego_speed: speed,
        cruise_speed: speed,
        steps,
        frame_period: FRAME_PERIOD,
        route_goal: 0.0,
    }
}

fn car(x: f64, y: f64, speed: SpeedProfile) -> AgentScript {
    AgentScript {
        class: AgentClass::Car,
        size: AgentClass::Car.size(),
        path: Path::line([-100.0, y], [1000.0, y]),
        start_s: x + 100.0,
        speed,
        lateral: LateralProfile::constant(0.0),
        conflict: true,
    }
}

#[test]
fn generation_is_reproducible() {
    for fam in Family::ALL {
        let a = generate_scenario(fam, 11);
        assert_eq!(a, generate_scenario(fam, 11));
        assert_ne!(a, generate_scenario(fam, 12));
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&json).unwrap(), a);
    }
    assert!("roundabout".parse::<Family>().is_err());
    assert_eq!("cut_in".parse::<Family>().unwrap(), Family::CutIn);
}

#[test]
fn conflict_agents_by_family() {
    for seed in 0..10 {
        assert!(generate_scenario(Family::Straight, seed).agents.iter().all(|a| !a.conflict));
        for fam in &Family::ALL[1..] {
            assert!(generate_scenario(*fam, seed).agents.iter().any(|a| a.conflict), "{fam} {seed}");
        }
    }
}

#[test]
fn cut_in_agent_crosses_into_ego_lane() {
    for seed in 0..10 {
        let s = generate_scenario(Family::CutIn, seed);
        let a = s.agents.iter().find(|a| a.conflict).unwrap();
        let lat = a.lateral;
        // scripted lateral position, independent half-cosine rollout
        let oracle = |t: f64| {
            let u = ((t - lat.start) / lat.duration).clamp(0.0, 1.0);
            lat.from + (lat.to - lat.from) * (1.0 - (PI * u).cos()) / 2.0
        };
        let ys: Vec<f64> = (0..s.steps).map(|k| a.state(s.time(k)).pose.y).collect();
        for (k, y) in ys.iter().enumerate() {
            assert!((y - oracle(s.time(k))).abs() < 1e-9);
        }
        assert!(ys[0] > 1.75 + 0.5 * a.size[1]);
        assert!(ys.last().unwrap().abs() < 1.75);
    }
}

#[test]
fn empty_world_renders_background_only() {
    let s = empty_world(10, 5.0);
    let cams = default_cameras(48);
    let imgs = render_frame(&s, 3, &Pose2::default(), &cams);
    for (img, cam) in imgs.iter().zip(&cams) {
        assert_eq!(*img, background(cam));
    }
}

#[test]
fn agent_ahead_projects_into_front_view() {
    let mut s = empty_world(10, 5.0);
    s.agents.push(car(5.0 + 2.25, 0.0, SpeedProfile::cruise(0.0)));
    let cams = default_cameras(96);
    let imgs = render_frame(&s, 0, &Pose2::default(), &cams);
    // pinhole oracle for the near face center at 5 m, 0.75 m up
    let f = 48.0 / (PI / 6.0).tan();
    let (x, y, z) = (5.0, 0.0, 0.75);
    let u = 48.0 + f * (-y / x);
    let v = 48.0 + f * ((1.6 - z) / x);
    assert!((0.0..96.0).contains(&u) && (0.0..96.0).contains(&v));
    let (pu, pv, _) = cams[0].project(&Vector3::new(x, y, z)).unwrap();
    assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    assert_eq!(imgs[0].pixel(u as usize, v as usize), agent_color(AgentClass::Car));
    // rear camera sees nothing of it
    assert_eq!(imgs[2], background(&cams[2]));
}

#[test]
fn agent_behind_front_camera_is_culled() {
    let mut s = empty_world(10, 5.0);
    s.agents.push(car(-8.0, 0.0, SpeedProfile::cruise(0.0)));
    let cams = default_cameras(64);
    let imgs = render_frame(&s, 0, &Pose2::default(), &cams);
    assert_eq!(imgs[0], background(&cams[0]));
    assert_ne!(imgs[2], background(&cams[2]));
}

#[test]
fn zero_plan_stops_and_straight_plan_keeps_heading() {
    let s = empty_world(60, 6.0);
    let mut w = World::new(&s);
    for _ in 0..30 {
        w.step(&[[0.0, 0.0]; 6]);
    }
    assert_eq!(w.ego.speed, 0.0);
    let stopped = w.ego.pose;
    w.step(&[[0.0, 0.0]; 6]);
    assert_eq!(w.ego.pose, stopped);

    let mut w = World::new(&s);
    let plan: Vec<[f64; 2]> = (1..=6).map(|k| [6.0 * PLAN_DT * k as f64, 0.0]).collect();
    for _ in 0..30 {
        w.step(&plan);
    }
    assert_eq!(w.ego.pose.yaw, 0.0);
    assert!((w.ego.speed - 6.0).abs() < 1e-12);
    assert!((w.ego.pose.x - 6.0 * 3.0).abs() < 1e-9);
}

#[test]
fn bicycle_matches_constant_steer_arc() {
    let (v, steer) = (4.0, -0.15);
    let mut e = EgoState {
        pose: Pose2::new(2.0, 1.0, 0.3),
        speed: v,
        ..Default::default()
    };
    for _ in 0..10 {
        e.advance(0.0, steer, 0.1);
    }
    let r = dtx_simworld::world::WHEELBASE / steer.tan();
    let theta = v / r;
    let cx = 2.0 - r * 0.3f64.sin();
    let cy = 1.0 + r * 0.3f64.cos();
    assert!((e.pose.x - (cx + r * (0.3 + theta).sin())).abs() < 1e-9);
    assert!((e.pose.y - (cy - r * (0.3 + theta).cos())).abs() < 1e-9);
}

#[test]
fn expert_on_empty_road_cruises_straight() {
    let s = empty_world(20, 8.0);
    let w = World::new(&s);
    let plan = w.expert_plan(6, 0.5);
    for (k, p) in plan.waypoints.iter().enumerate() {
        assert!((p[0] - 8.0 * 0.5 * (k + 1) as f64).abs() < 1e-9);
        assert_eq!(p[1], 0.0);
    }
    assert_eq!(classify_mode(&plan.waypoints, &Default::default()), PlanMode::Straight);
    assert_eq!(plan.canbus.command, PlanMode::Straight);
}

#[test]
fn expert_stops_behind_stopped_lead() {
    let mut s = empty_world(80, 6.0);
    s.agents.push(car(8.0, 0.0, SpeedProfile::cruise(0.0)));
    let mut w = World::new(&s);
    let first = w.expert_plan(6, 0.5);
    assert!(first.waypoints[0][0] < 6.0 * 0.5);
    let mut modes = vec![];
    while !w.done() {
        let p = w.expert_plan(6, 0.5);
        modes.push(classify_mode(&p.waypoints, &Default::default()));
        w.step(&p.waypoints);
    }
    assert!(modes.contains(&PlanMode::Stop));
    assert_eq!(w.collisions, 0);
    assert_eq!(w.ego.speed, 0.0);
}

#[test]
fn turn_route_yields_left_mode() {
    let s = generate_scenario(Family::Turn, 3);
    let mut w = World::new(&s);
    let mut saw_left = false;
    while !w.done() {
        let p = w.expert_plan(6, 0.5);
        let m = classify_mode(&p.waypoints, &Default::default());
        saw_left |= matches!(m, PlanMode::Left | PlanMode::SharpLeft);
        w.step(&p.waypoints);
    }
    assert!(saw_left);
}

#[test]
fn constant_velocity_agent_future_is_straight_ahead() {
    let mut s = empty_world(20, 5.0);
    s.agents.push(car(0.0, 0.0, SpeedProfile::cruise(5.0)));
    let c = cfg();
    let ego = EgoState {
        speed: 5.0,
        ..Default::default()
    };
    let labels = label_frame(&s, 0, &ego, &c);
    let b = &labels.boxes[0];
    assert_eq!(b.future.len(), c.motion_horizon);
    for (k, p) in b.future.iter().enumerate() {
        assert!((p[0] - 5.0 * c.waypoint_dt * (k + 1) as f64).abs() < 1e-9 && p[1].abs() < 1e-12);
    }
    assert_eq!(labels.ego_future.len(), c.plan_horizon);
}

#[test]
fn polylines_are_clipped_at_range() {
    let mut s = empty_world(20, 5.0);
    s.map.push(MapElement {
        class: MapClass::Boundary,
        points: vec![[-100.0, 1.75], [100.0, 1.75]],
    });
    let c = cfg();
    let labels = label_frame(&s, 0, &EgoState::default(), &c);
    assert_eq!(labels.polylines.len(), 1);
    let p = &labels.polylines[0];
    assert_eq!(p.points.len(), c.points_per_polyline);
    assert_eq!(p.points[0], [-32.0, 1.75]);
    assert!((p.points.last().unwrap()[0] - 32.0).abs() < 1e-12);
    assert_eq!(p.class, MapClass::Boundary as usize);
}

#[test]
fn labels_round_trip_through_world_frame() {
    let c = cfg();
    for fam in Family::ALL {
        let s = generate_scenario(fam, 5);
        let states = expert_rollout(&s);
        for step in [0, 40, 90] {
            let ego = states[step];
            let labels = label_frame(&s, step, &ego, &c);
            let t = s.time(step);
            let agents: Vec<_> = s.agents.iter().map(|a| a.state(t)).collect();
            for b in &labels.boxes {
                let world = ego.pose.to_parent([b.center[0], b.center[1]]);
                let back = ego.pose.to_local(world);
                assert!((back[0] - b.center[0]).abs() < 1e-9 && (back[1] - b.center[1]).abs() < 1e-9);
                assert!(agents.iter().any(|a| (a.pose.x - world[0]).abs() < 1e-9 && (a.pose.y - world[1]).abs() < 1e-9));
            }
            let inside = agents
                .iter()
                .filter(|a| {
                    let [x, y] = ego.pose.to_local([a.pose.x, a.pose.y]);
                    c.perception.contains_xy(x, y)
                })
                .count();
            assert_eq!(inside, labels.boxes.len());
        }
    }
}

#[test]
fn expert_closed_loop_completes_without_collisions() {
    for fam in Family::ALL {
        for seed in 0..3 {
            let s = generate_scenario(fam, seed);
            let mut w = World::new(&s);
            while !w.done() {
                let p = w.expert_plan(6, PLAN_DT);
                w.step(&p.waypoints);
            }
            assert_eq!(w.completion(), 1.0);
            assert_eq!((w.collisions, w.off_route_events), (0, 0), "{fam} {seed}");
        }
    }
}

#[test]
fn zero_plan_barely_moves() {
    for fam in Family::ALL {
        let s = generate_scenario(fam, 1);
        let mut w = World::new(&s);
        while !w.done() {
            w.step(&[[0.0, 0.0]; 6]);
        }
        assert!(w.completion() < 0.05, "{fam}: {}", w.completion());
    }
}

#[test]
fn clips_are_deterministic() {
    let c = cfg();
    let s = generate_scenario(Family::Merge, 2);
    let a = generate_clip(s.clone(), 10..14, default_cameras(32), &c).unwrap();
    let b = generate_clip(s.clone(), 10..14, default_cameras(32), &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames.len(), 4);
    assert_eq!(a.ego_poses().keys().copied().collect::<Vec<_>>(), vec![10, 11, 12, 13]);
    assert!(generate_clip(s, 100..200, default_cameras(32), &c).is_err());
}

#[test]
fn image_container_round_trip() {
    let mut img = dtx_core::tokenizer::RgbImage::black(5, 3);
    img.set_pixel(4, 2, [1, 2, 3]);
    let mut buf = Vec::new();
    write_image(&mut buf, &img, 2).unwrap();
    assert_eq!(buf.len(), 16 + 45);
    assert_eq!(&buf[..4], b"DTXI");
    let (back, cam) = read_image(&buf[..]).unwrap();
    assert_eq!((back, cam), (img, 2));
    buf[0] = b'X';
    assert!(read_image(&buf[..]).is_err());
}

#[test]
fn labels_round_trip_through_json_lines() {
    let c = cfg();
    let clip = generate_clip(generate_scenario(Family::CutIn, 0), 0..3, default_cameras(16), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let labels: Vec<_> = clip.frames.iter().map(|f| f.labels.clone()).collect();
    write_jsonl(&path, &labels).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    assert_eq!(read_jsonl::<dtx_core::labels::FrameLabels>(&path).unwrap(), labels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_camera_pose_renders_deterministically(yaw in -PI..PI, x in -20.0f64..60.0, seed in 0u64..50) {
        let s = generate_scenario(Family::ALL[(seed % 5) as usize], seed);
        let cams = vec![CameraModel::looking(yaw, 1.6, PI / 3.0, 24, 24)];
        let ego = Pose2::new(x, 0.0, 0.0);
        prop_assert_eq!(render_frame(&s, 7, &ego, &cams), render_frame(&s, 7, &ego, &cams));
    }
}
