//! Software rasterizer: shaded ground and sky, 1-px map curves, filled agent
//! boxes in painter's order.

use dtx_core::geometry::{CameraModel, Pose2};
use dtx_core::tokenizer::RgbImage;
use nalgebra::Vector3;

use crate::path::clip_to_box;
use crate::scenario::{AgentClass, MapClass, Scenario};

const SKY: [u8; 3] = [135, 175, 215];
/// Map geometry farther than this from the ego is not drawn.
const DRAW_DISTANCE: f64 = 80.0;
const NEAR: f64 = 0.3;
const SAMPLE_STEP: f64 = 0.5;

pub fn agent_color(class: AgentClass) -> [u8; 3] {
    match class {
        AgentClass::Car => [200, 40, 40],
        AgentClass::Truck => [40, 60, 200],
        AgentClass::Cyclist => [40, 180, 60],
    }
}

pub fn map_color(class: MapClass) -> [u8; 3] {
    match class {
        MapClass::Centerline => [230, 200, 40],
        MapClass::Boundary => [245, 245, 245],
        MapClass::Crossing => [160, 120, 200],
    }
}

/// Sky above the horizon, ground shaded by distance below it.
pub fn background(cam: &CameraModel) -> RgbImage {
    let mut img = RgbImage::black(cam.width, cam.height);
    let kinv = cam.intrinsics.try_inverse().expect("camera intrinsics are invertible");
    let rot = cam.extrinsics.rotation();
    let origin = cam.extrinsics.translation();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let ray = rot * (kinv * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0));
            let rgb = if ray.z < -1e-9 {
                let dist = (origin.z / -ray.z) * ray.xy().norm();
                let shade = 60.0 + 50.0 * (-dist / 25.0).exp();
                let g = shade.round() as u8;
                [g, g, g.saturating_add(4)]
            } else {
                SKY
            };
            img.set_pixel(u, v, rgb);
        }
    }
    img
}

/// Integer line between two pixel positions already clipped to the image.
fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], rgb: [u8; 3]) {
    let (w, h) = (img.width as i64, img.height as i64);
    let (mut x0, mut y0) = (a[0].floor() as i64, a[1].floor() as i64);
    let (x1, y1) = (b[0].floor() as i64, b[1].floor() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            img.set_pixel(x0 as usize, y0 as usize, rgb);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn fill_convex(img: &mut RgbImage, hull: &[[f64; 2]], rgb: [u8; 3]) {
    if hull.len() < 3 {
        return;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in hull {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let u0 = lo[0].floor().max(0.0) as usize;
    let v0 = lo[1].floor().max(0.0) as usize;
    let u1 = (hi[0].ceil().max(0.0) as usize).min(img.width);
    let v1 = (hi[1].ceil().max(0.0) as usize).min(img.height);
    for v in v0..v1 {
        for u in u0..u1 {
            let c = [u as f64 + 0.5, v as f64 + 0.5];
            let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], c) >= 0.0);
            if inside {
                img.set_pixel(u, v, rgb);
            }
        }
    }
}

/// Images of the world at `step` seen from an ego at `ego` (world frame).
/// Agents with any corner behind the near plane of a camera are culled from
/// that view.
pub fn render_frame(scn: &Scenario, step: usize, ego: &Pose2, cameras: &[CameraModel]) -> Vec<RgbImage> {
    let t = scn.time(step);
    let mut agents: Vec<(f64, usize, Pose2)> = scn
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let s = a.state(t);
            let local = ego.relative(&s.pose);
            (local.x.hypot(local.y), i, local)
        })
        .collect();
    agents.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let lines: Vec<(MapClass, Vec<[f64; 2]>)> = scn
        .map
        .iter()
        .flat_map(|el| {
            let local: Vec<[f64; 2]> = el.points.iter().map(|&p| ego.to_local(p)).collect();
            clip_to_box(&local, [-DRAW_DISTANCE; 2], [DRAW_DISTANCE; 2])
                .into_iter()
                .map(move |piece| (el.class, piece))
        })
        .collect();

    cameras
        .iter()
        .map(|cam| {
            let mut img = background(cam);
            let bounds = ([0.0, 0.0], [cam.width as f64 - 1e-9, cam.height as f64 - 1e-9]);
            for (class, piece) in &lines {
                let mut samples = Vec::new();
                for w in piece.windows(2) {
                    let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
                    let n = (len / SAMPLE_STEP).ceil().max(1.0) as usize;
                    for k in 0..n {
                        let u = k as f64 / n as f64;
                        samples.push([w[0][0] + u * (w[1][0] - w[0][0]), w[0][1] + u * (w[1][1] - w[0][1])]);
                    }
                }
                samples.push(*piece.last().unwrap());
                let projected: Vec<Option<[f64; 2]>> = samples
                    .iter()
                    .map(|p| {
                        cam.project(&Vector3::new(p[0], p[1], 0.0))
                            .filter(|&(_, _, d)| d > NEAR)
                            .map(|(u, v, _)| [u, v])
                    })
                    .collect();
                for w in projected.windows(2) {
                    if let (Some(a), Some(b)) = (w[0], w[1]) {
                        for seg in clip_to_box(&[a, b], bounds.0, bounds.1) {
                            draw_line(&mut img, seg[0], seg[1], map_color(*class));
                        }
                    }
                }
            }
            for &(_, i, local) in &agents {
                let a = &scn.agents[i];
                let [l, w, h] = a.size;
                let mut pts = Vec::with_capacity(8);
                let mut visible = true;
                for (du, dv) in [(0.5, 0.5), (0.5, -0.5), (-0.5, -0.5), (-0.5, 0.5)] {
                    let [x, y] = local.to_parent([du * l, dv * w]);
                    for z in [0.0, h] {
                        match cam.project(&Vector3::new(x, y, z)) {
                            Some((u, v, d)) if d > NEAR => pts.push([u, v]),
                            _ => visible = false,
                        }
                    }
                }
                if visible {
                    fill_convex(&mut img, &convex_hull(pts), agent_color(a.class));
                }
            }
            img
        })
        .collect()
}
