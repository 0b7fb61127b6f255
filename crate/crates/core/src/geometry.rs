//! Rigid transforms, pinhole cameras, ray lifting and sinusoidal encodings.
//!
//! Frames: the ego frame has x forward, y left, z up. Camera frames follow the
//! pinhole convention (x right, y down, z along the optical axis).

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Homogeneous 4x4 rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Builds from a rotation block and translation. The rotation is
    /// re-orthonormalized; it must already be orthonormal to within 1e-6 and
    /// have determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if !dev.is_finite() || dev > ORTHONORMAL_TOL {
            return Err(Error::Geometry(format!(
                "rotation block is not orthonormal (deviation {dev:e})"
            )));
        }
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
        let r = u * vt;
        if r.determinant() <= 0.0 {
            return Err(Error::Geometry("rotation determinant is not +1".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry("non-finite translation".into()));
        }
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Ok(Self { matrix })
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = matrix.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Geometry("bottom row must be [0, 0, 0, 1]".into()));
        }
        Self::new(
            matrix.fixed_view::<3, 3>(0, 0).into_owned(),
            matrix.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix }
    }

    /// Rotation about +z by `yaw` followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix }
    }

    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Heading of the transformed x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let m = self.matrix * other.matrix;
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
        .expect("product of rigid transforms is rigid")
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }
}

/// Planar pose (x, y, heading) in some parent frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn to_parent(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
        ]
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Expresses `other` (given in the parent frame) relative to this pose.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let [x, y] = self.to_local([other.x, other.y]);
        Pose2::new(x, y, wrap_angle(other.yaw - self.yaw))
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, Vector3::new(self.x, self.y, 0.0))
    }
}

/// Wraps to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Pinhole camera: intrinsics `K`, camera-to-ego extrinsics `T`, image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(intrinsics: Matrix3<f64>, extrinsics: RigidTransform, width: usize, height: usize) -> Result<Self> {
        let det = intrinsics.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Geometry("intrinsics are singular".into()));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    /// Camera at `height` metres above the ego origin looking along `yaw`,
    /// with horizontal field of view `fov` radians.
    pub fn looking(yaw: f64, mount_height: f64, fov: f64, width: usize, height: usize) -> Self {
        let f = (width as f64 / 2.0) / (fov / 2.0).tan();
        let k = Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0);
        let (s, c) = yaw.sin_cos();
        // columns: camera x (right), y (down), z (forward) in ego coordinates
        let r = Matrix3::new(s, 0.0, c, -c, 0.0, s, 0.0, -1.0, 0.0);
        let t = RigidTransform::new(r, Vector3::new(0.0, 0.0, mount_height)).expect("camera rotation");
        Self::new(k, t, width, height).expect("camera intrinsics")
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64
    }

    /// Ego point to continuous pixel coordinates and depth; `None` behind
    /// the camera.
    pub fn project(&self, p_ego: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.extrinsics.inverse().apply(p_ego);
        if pc.z <= 1e-6 {
            return None;
        }
        let h = self.intrinsics * pc;
        Some((h.x / h.z, h.y / h.z, pc.z))
    }

    /// Camera-frame point at depth `d` along pixel `(u, v)`: `K^-1 [u d, v d, d]`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Result<Vector3<f64>> {
        let kinv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Geometry("intrinsics are singular".into()))?;
        Ok(kinv * Vector3::new(u * d, v * d, d))
    }
}

/// Equally spaced depth samples along a camera ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub count: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBins {
    pub fn new(count: usize, d_min: f64, d_max: f64) -> Result<Self> {
        if count == 0 || !(d_min > 0.0 && d_min < d_max) {
            return Err(Error::Geometry(format!(
                "depth bins need count >= 1 and 0 < d_min < d_max, got {count}, {d_min}, {d_max}"
            )));
        }
        Ok(Self { count, d_min, d_max })
    }

    pub fn depths(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.d_min];
        }
        let step = (self.d_max - self.d_min) / (self.count - 1) as f64;
        (0..self.count).map(|k| self.d_min + step * k as f64).collect()
    }
}

/// Ego-frame points along the ray through pixel `(u, v)`, by increasing depth.
pub fn ray_points(cam: &CameraModel, pixel: (f64, f64), bins: &DepthBins) -> Result<Vec<Vector3<f64>>> {
    let (u, v) = pixel;
    if !cam.contains_pixel(u, v) {
        return Err(Error::Geometry(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    bins.depths()
        .into_iter()
        .map(|d| Ok(cam.extrinsics.apply(&cam.unproject(u, v, d)?)))
        .collect()
}

/// Interleaved `[sin(w_0 x), cos(w_0 x), sin(w_1 x), ...]` per coordinate,
/// with geometric frequencies `w_k = 2^-k`.
pub fn sincos_encode(x: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * num_freqs * x.len());
    for &v in x {
        let mut w = 1.0;
        for _ in 0..num_freqs {
            let (s, c) = (w * v).sin_cos();
            out.push(s);
            out.push(c);
            w *= 0.5;
        }
    }
    out
}

/// Axis-aligned box around the ego origin inside which scene elements are
/// labelled and queries are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for PerceptionRange {
    fn default() -> Self {
        Self {
            x: (-32.0, 32.0),
            y: (-32.0, 32.0),
            z: (-3.0, 5.0),
        }
    }
}

impl PerceptionRange {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        self.contains_xy(p[0], p[1]) && p[2] >= self.z.0 && p[2] <= self.z.1
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x.0 && x <= self.x.1 && y >= self.y.0 && y <= self.y.1
    }

    /// Largest horizontal distance from the origin to the range boundary.
    pub fn max_extent(&self) -> f64 {
        let xs = self.x.0.abs().max(self.x.1.abs());
        let ys = self.y.0.abs().max(self.y.1.abs());
        xs.hypot(ys)
    }

    /// Maps each axis to [-1, 1].
    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let n = |v: f64, (lo, hi): (f64, f64)| 2.0 * (v - lo) / (hi - lo) - 1.0;
        [n(p[0], self.x), n(p[1], self.y), n(p[2], self.z)]
    }
}
