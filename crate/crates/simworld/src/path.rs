//! Arc-length parameterized 2D polylines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polyline with cumulative arc length. Queries past either end extrapolate
/// along the first or last segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

impl Path {
    /// Consecutive duplicate points are dropped; at least two distinct
    /// points must remain.
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidArgument("non-finite path point".into()));
            }
            if pts.last().is_none_or(|&q| dist(q, p) > 1e-9) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(Error::InvalidArgument("path needs two distinct points".into()));
        }
        let mut cumulative = vec![0.0];
        for w in pts.windows(2) {
            cumulative.push(cumulative.last().unwrap() + dist(w[0], w[1]));
        }
        Ok(Self { points: pts, cumulative })
    }

    pub fn line(from: [f64; 2], to: [f64; 2]) -> Self {
        Self::new(vec![from, to]).expect("distinct endpoints")
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = (s - self.cumulative[i]) / len;
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Closest point as `(arc length, signed lateral offset)`; positive
    /// offsets lie to the left of the direction of travel.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let last = self.points.len() - 2;
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let mut u = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2;
            let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
            let hi = if i == last { f64::INFINITY } else { 1.0 };
            u = u.clamp(lo, hi);
            let q = [a[0] + u * d[0], a[1] + u * d[1]];
            let dd = dist(p, q);
            if dd < best.0 {
                let cross = d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0]);
                let lateral = if cross >= 0.0 { dd } else { -dd };
                best = (dd, self.cumulative[i] + u * len2.sqrt(), lateral);
            }
        }
        (best.1, best.2)
    }

    /// Copy shifted `offset` metres to the left, vertex by vertex along the
    /// averaged normals.
    pub fn offset(&self, offset: f64) -> Self {
        let n = self.points.len();
        let pts = (0..n)
            .map(|i| {
                let h0 = if i > 0 { self.seg_heading(i - 1) } else { self.seg_heading(0) };
                let h1 = if i < n - 1 { self.seg_heading(i) } else { self.seg_heading(n - 2) };
                let (s, c) = ((h0.sin() + h1.sin()) / 2.0, (h0.cos() + h1.cos()) / 2.0);
                let norm = s.hypot(c);
                let p = self.points[i];
                [p[0] - s / norm * offset, p[1] + c / norm * offset]
            })
            .collect();
        Self::new(pts).expect("offset keeps distinct points")
    }

    fn seg_heading(&self, i: usize) -> f64 {
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Signed curvature of the discrete polyline near `s`, from the heading
    /// change across the neighbouring vertices.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let h = 1.0;
        let d = dtx_core::geometry::wrap_angle(self.heading_at(s + h) - self.heading_at(s - h));
        d / (2.0 * h)
    }
}

/// `count` points spaced uniformly by arc length from start to end.
pub fn resample(points: &[[f64; 2]], count: usize) -> Option<Vec<[f64; 2]>> {
    let path = Path::new(points.to_vec()).ok()?;
    let len = path.length();
    Some(
        (0..count)
            .map(|k| path.point_at(len * k as f64 / (count.max(2) - 1) as f64))
            .collect(),
    )
}

/// Pieces of a polyline inside the axis-aligned box `[lo, hi]`, in order.
/// Segments are clipped exactly at the box boundary.
pub fn clip_to_box(points: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> Vec<Vec<[f64; 2]>> {
    let mut pieces: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut current: Vec<[f64; 2]> = Vec::new();
    for w in points.windows(2) {
        match clip_segment(w[0], w[1], lo, hi) {
            Some((a, b, ends_inside)) => {
                if current.last().is_none_or(|&q| dist(q, a) > 1e-12) {
                    if !current.is_empty() {
                        pieces.push(std::mem::take(&mut current));
                    }
                    current.push(a);
                }
                current.push(b);
                if !ends_inside {
                    pieces.push(std::mem::take(&mut current));
                }
            }
            None => {
                if !current.is_empty() {
                    pieces.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces.retain(|p| p.len() >= 2);
    pieces
}

/// Liang-Barsky clip; returns the visible part and whether the original end
/// point lies inside.
fn clip_segment(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> Option<([f64; 2], [f64; 2], bool)> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        for (p, q) in [(-d[k], a[k] - lo[k]), (d[k], hi[k] - a[k])] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
    }
    if t0 > t1 || (t1 - t0) * d[0].hypot(d[1]) < 1e-12 {
        return None;
    }
    let at = |t: f64| [a[0] + t * d[0], a[1] + t * d[1]];
    Some((at(t0), at(t1), t1 >= 1.0))
}
