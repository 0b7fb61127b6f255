use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthBins, PerceptionRange};
use crate::numerics::{Activation, Precision};

/// Named width/depth presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Small,
    Base,
    Large,
}

impl Preset {
    /// `(layers, hidden)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            Preset::Small => (3, 256),
            Preset::Base => (6, 512),
            Preset::Large => (12, 768),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Large => "large",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Output scaling of the regression heads, in metres (or m/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScales {
    pub position: f64,
    pub size: f64,
    pub velocity: f64,
    pub trajectory: f64,
}

impl Default for HeadScales {
    fn default() -> Self {
        Self {
            position: 8.0,
            size: 4.0,
            velocity: 8.0,
            trajectory: 10.0,
        }
    }
}

/// Thresholds that bin an ego trajectory into one of the six plan modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeThresholds {
    pub stop_distance: f64,
    pub straight_deg: f64,
    pub sharp_deg: f64,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self {
            stop_distance: 0.5,
            straight_deg: 15.0,
            sharp_deg: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_agent_queries: usize,
    pub num_map_queries: usize,
    pub points_per_polyline: usize,
    pub queue_len: usize,
    pub top_k: usize,
    pub perception: PerceptionRange,
    pub depth_bins: DepthBins,
    pub patch_size: usize,
    pub num_freqs: usize,
    pub agent_classes: usize,
    pub map_classes: usize,
    pub plan_horizon: usize,
    pub motion_horizon: usize,
    pub motion_modes: usize,
    pub waypoint_dt: f64,
    pub frame_period: f64,
    pub dropout: f64,
    pub activation: Activation,
    pub precision: Precision,
    pub scales: HeadScales,
    pub modes: ModeThresholds,
    pub seed: u64,
}

/// Number of ego plan modes.
pub const PLAN_MODES: usize = 6;
/// Length of the canbus feature vector.
pub const CANBUS_DIM: usize = 5 + PLAN_MODES;

impl ModelConfig {
    /// Full-size query counts (900 agent, 100 map queries).
    pub fn preset(preset: Preset) -> Self {
        let (num_layers, hidden) = preset.dims();
        let perception = PerceptionRange::default();
        Self {
            num_layers,
            hidden,
            heads: hidden / 64,
            ffn_dim: 2 * hidden,
            num_agent_queries: 900,
            num_map_queries: 100,
            points_per_polyline: 20,
            queue_len: 10,
            top_k: 50,
            perception,
            depth_bins: DepthBins {
                count: 8,
                d_min: 1.0,
                d_max: perception.x.1,
            },
            patch_size: 12,
            num_freqs: 8,
            agent_classes: 3,
            map_classes: 3,
            plan_horizon: 6,
            motion_horizon: 6,
            motion_modes: 6,
            waypoint_dt: 0.5,
            frame_period: 0.1,
            dropout: 0.0,
            activation: Activation::Gelu,
            precision: Precision::Double,
            scales: HeadScales::default(),
            modes: ModeThresholds::default(),
            seed: 0,
        }
    }

    /// Preset widths with query counts sized for the bundled world.
    pub fn desk(preset: Preset) -> Self {
        Self {
            num_agent_queries: 32,
            num_map_queries: 16,
            points_per_polyline: 8,
            ..Self::preset(preset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("points_per_polyline", self.points_per_polyline),
            ("queue_len", self.queue_len),
            ("patch_size", self.patch_size),
            ("num_freqs", self.num_freqs),
            ("agent_classes", self.agent_classes),
            ("map_classes", self.map_classes),
            ("plan_horizon", self.plan_horizon),
            ("motion_horizon", self.motion_horizon),
            ("motion_modes", self.motion_modes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.waypoint_dt > 0.0 && self.frame_period > 0.0) {
            return Err(Error::Config("time steps must be positive".into()));
        }
        DepthBins::new(self.depth_bins.count, self.depth_bins.d_min, self.depth_bins.d_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        let p = &self.perception;
        if !(p.x.0 < p.x.1 && p.y.0 < p.y.1 && p.z.0 < p.z.1) {
            return Err(Error::Config("empty perception range".into()));
        }
        Ok(())
    }

    /// Map queries replicated per polyline point.
    pub fn map_point_rows(&self) -> usize {
        self.num_map_queries * self.points_per_polyline
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_size_table() {
        assert_eq!(ModelConfig::preset(Preset::Small).num_layers, 3);
        assert_eq!(ModelConfig::preset(Preset::Small).hidden, 256);
        assert_eq!(Preset::Base.dims(), (6, 512));
        assert_eq!(Preset::Large.dims(), (12, 768));
        let c = ModelConfig::preset(Preset::Base);
        assert_eq!((c.num_agent_queries, c.num_map_queries), (900, 100));
        assert_eq!((c.queue_len, c.top_k), (10, 50));
        for p in [Preset::Small, Preset::Base, Preset::Large] {
            ModelConfig::preset(p).validate().unwrap();
            ModelConfig::desk(p).validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::desk(Preset::Small);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(Preset::Small);
        c.num_layers = 0;
        assert!(c.validate().is_err());
        assert!("huge".parse::<Preset>().is_err());
    }
}
