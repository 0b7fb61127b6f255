//! Sensor corruptions for robustness evaluation. Every kind is the identity
//! at zero intensity.

use std::fmt;
use std::str::FromStr;

use dtx_core::geometry::{CameraModel, RigidTransform};
use dtx_core::tokenizer::RgbImage;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation noise at unit intensity, degrees.
pub const ROTATION_SIGMA_DEG: f64 = 2.0;
/// Translation noise at unit intensity, metres.
pub const TRANSLATION_SIGMA: f64 = 0.1;
/// Box-blur length at unit intensity, pixels.
pub const BLUR_LENGTH: f64 = 5.0;
/// Additive noise at unit intensity, as a fraction of the 0..255 range.
pub const NOISE_SIGMA: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    CameraCrash,
    Calibration,
    Blur,
    Noise,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::CameraCrash,
        PerturbKind::Calibration,
        PerturbKind::Blur,
        PerturbKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::CameraCrash => "camera_crash",
            PerturbKind::Calibration => "calibration",
            PerturbKind::Blur => "blur",
            PerturbKind::Noise => "noise",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbKind,
    /// Multiplier on the unit-intensity noise levels; 0 is the identity.
    pub intensity: f64,
    pub seed: u64,
    /// Cameras blacked out by a crash.
    pub crashed: Vec<usize>,
}

impl Perturbation {
    pub fn new(kind: PerturbKind, intensity: f64, seed: u64) -> Self {
        Self {
            kind,
            intensity,
            seed,
            crashed: vec![1, 3],
        }
    }

    /// Corrupts the images and the calibration the model sees for episode
    /// step `step`. Calibration error is fixed per seed; image noise varies
    /// per step.
    pub fn apply(&self, images: &mut [RgbImage], cameras: &mut [CameraModel], step: usize) -> Result<()> {
        // exact identity; composing even an identity rotation re-rounds extrinsics
        if self.intensity == 0.0 {
            return Ok(());
        }
        match self.kind {
            PerturbKind::CameraCrash => camera_crash(images, &self.crashed)?,
            PerturbKind::Calibration => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                calibration_noise(
                    cameras,
                    (self.intensity * ROTATION_SIGMA_DEG).to_radians(),
                    self.intensity * TRANSLATION_SIGMA,
                    &mut rng,
                )?;
            }
            PerturbKind::Blur => {
                let len = (self.intensity * BLUR_LENGTH).round().max(1.0) as usize;
                for img in images.iter_mut() {
                    *img = box_blur(img, len);
                }
            }
            PerturbKind::Noise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(step as u64);
                let sigma = self.intensity * NOISE_SIGMA * 255.0;
                for img in images.iter_mut() {
                    gaussian_noise(img, sigma, &mut rng)?;
                }
            }
        }
        Ok(())
    }
}

/// Blacks out `which` cameras.
pub fn camera_crash(images: &mut [RgbImage], which: &[usize]) -> Result<()> {
    let n = images.len();
    for &i in which {
        let img = images
            .get_mut(i)
            .ok_or_else(|| Error::InvalidArgument(format!("camera {i} of {n}")))?;
        img.data.iter_mut().for_each(|b| *b = 0);
    }
    Ok(())
}

/// Composes each extrinsic with a random rotation (per-axis Gaussian angles)
/// and translation.
pub fn calibration_noise<R: Rng + ?Sized>(cameras: &mut [CameraModel], rot_sigma: f64, trans_sigma: f64, rng: &mut R) -> Result<()> {
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::InvalidArgument(e.to_string()));
    let (nr, nt) = (normal(rot_sigma)?, normal(trans_sigma)?);
    for cam in cameras.iter_mut() {
        let (roll, pitch, yaw) = (nr.sample(rng), nr.sample(rng), nr.sample(rng));
        let t = Vector3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
        let noise = RigidTransform::from_euler(roll, pitch, yaw, t);
        cam.extrinsics = noise.compose(&cam.extrinsics);
    }
    Ok(())
}

/// Horizontal box blur of `len` pixels (centered, edges clamped, rounded).
pub fn box_blur(img: &RgbImage, len: usize) -> RgbImage {
    if len <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let lo = (len as isize - 1) / 2;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for k in 0..len as isize {
                let xs = (x as isize - lo + k).clamp(0, w as isize - 1) as usize;
                let p = img.pixel(xs, y);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
            let n = len as u32;
            out.set_pixel(x, y, acc.map(|a| ((a + n / 2) / n) as u8));
        }
    }
    out
}

/// Adds rounded Gaussian noise of standard deviation `sigma` (0..255 units).
pub fn gaussian_noise<R: Rng + ?Sized>(img: &mut RgbImage, sigma: f64, rng: &mut R) -> Result<()> {
    let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for b in img.data.iter_mut() {
        *b = (*b as f64 + n.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
    Ok(())
}
