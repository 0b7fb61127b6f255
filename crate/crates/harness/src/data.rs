//! Deterministic datasets of rendered clips.

use dtx_core::ModelConfig;
use dtx_simworld::{default_cameras, generate_clip, generate_scenario, Clip, Family, Scenario};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Families assigned round-robin to clips.
    pub families: Vec<Family>,
    pub clips: usize,
    pub frames_per_clip: usize,
    /// First episode step of every clip.
    pub clip_start: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            clips: 10,
            frames_per_clip: 20,
            clip_start: 10,
            image_size: dtx_simworld::dataset::IMAGE_SIZE,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_frames(&self) -> usize {
        self.clips * self.frames_per_clip
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidArgument("no scenario families".into()));
        }
        if self.clips == 0 || self.frames_per_clip == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        Ok(())
    }
}

/// Scenario `i` of a round-robin set: family `families[i % n]`, seed
/// `seed + i`.
pub fn scenario_set(families: &[Family], count: usize, seed: u64) -> Vec<Scenario> {
    (0..count)
        .map(|i| generate_scenario(families[i % families.len()], seed + i as u64))
        .collect()
}

pub fn build_dataset(spec: &DatasetSpec, cfg: &ModelConfig) -> Result<Vec<Clip>> {
    spec.validate()?;
    scenario_set(&spec.families, spec.clips, spec.seed)
        .into_iter()
        .map(|scn| {
            let range = spec.clip_start..spec.clip_start + spec.frames_per_clip;
            Ok(generate_clip(scn, range, default_cameras(spec.image_size), cfg)?)
        })
        .collect()
}

/// `(clip, frame)` pairs in streaming order: clips in sequence, frames in
/// step order.
pub fn frame_order(clips: &[Clip]) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| (c, f)))
        .collect()
}
