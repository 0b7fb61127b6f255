//! Sectioned `key = value` configuration with documented defaults.
//!
//! Precedence: `--set section.key=value` over the file over defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dtx_core::numerics::Precision;
use dtx_core::{ModelConfig, Preset};
use dtx_harness::bench::BenchConfig;
use dtx_harness::data::DatasetSpec;
use dtx_harness::{Schedule, TrainConfig};
use dtx_simworld::Family;

/// Invalid configuration: unknown keys, unparsable values, out-of-range
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub struct KeyDef {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> KeyDef {
    KeyDef {
        section,
        key,
        default,
        doc,
    }
}

const ALL_FAMILIES: &str = "straight,cut_in,emergency_brake,merge,turn";

pub const KEYS: &[KeyDef] = &[
    k("model", "preset", "small", "small | base | large"),
    k("model", "layers", "0", "block count; 0 keeps the preset value"),
    k("model", "hidden", "0", "hidden width; 0 keeps the preset value"),
    k("model", "precision", "single", "matmul arithmetic: single | double"),
    k("model", "seed", "0", "parameter initialization seed"),
    k("model", "agent_queries", "32", "agent query count"),
    k("model", "map_queries", "16", "map polyline query count"),
    k("model", "points_per_polyline", "8", "points per map polyline"),
    k("model", "queue_len", "10", "temporal queue length in frames"),
    k("model", "top_k", "50", "agent and map rows kept per queued frame"),
    k("train", "lr", "1e-4", "peak learning rate"),
    k("train", "weight_decay", "0.05", "decoupled weight decay"),
    k("train", "dropout", "0.1", "dropout probability"),
    k("train", "schedule", "cosine", "cosine | constant"),
    k("train", "epochs", "1", "passes over the data when steps = 0"),
    k("train", "steps", "0", "optimizer updates; 0 derives from epochs"),
    k("train", "batch_size", "1", "frames per update"),
    k("train", "seed", "0", "dropout seed"),
    k("train", "grad_clip", "35", "gradient norm clip; 0 disables"),
    k("train", "log_every", "10", "progress line interval in steps"),
    k("world", "families", ALL_FAMILIES, "comma-separated scenario families, assigned round-robin"),
    k("world", "clips", "10", "training clips"),
    k("world", "frames_per_clip", "20", "frames per clip"),
    k("world", "clip_start", "10", "first episode step of each clip"),
    k("world", "image_size", "96", "square camera image size in pixels"),
    k("world", "seed", "0", "scenario seed of the first clip"),
    k("world", "scenario_dir", "", "directory of generated scenario files; empty generates from families"),
    k("eval", "families", "straight,cut_in", "closed-loop scenario families"),
    k("eval", "scenarios", "10", "closed-loop scenario count"),
    k("eval", "episode_steps", "120", "closed-loop episode length in frames"),
    k("eval", "seed", "1000", "seed of the first evaluation scenario or clip"),
    k("eval", "clips", "2", "open-loop evaluation clips"),
    k("eval", "policy", "model", "model | expert | zero"),
    k("eval", "intensity", "1.0", "perturbation intensity for robust mode"),
    k("eval", "perturb_seed", "0", "perturbation seed"),
    k("bench", "warmup", "3", "untimed forwards (at least 3)"),
    k("bench", "iters", "10", "timed forwards"),
    k("bench", "episode_steps", "20", "frames pushed before reading queue memory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|d| ((d.section.to_string(), d.key.to_string()), d.default.to_string()))
                .collect(),
        }
    }
}

fn known(section: &str, key: &str) -> bool {
    KEYS.iter().any(|d| d.section == section && d.key == key)
}

impl CliConfig {
    /// Default file with every key and its documentation.
    pub fn documented() -> String {
        let mut out = String::new();
        let mut section = "";
        for d in KEYS {
            if d.section != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", d.section));
                section = d.section;
            }
            out.push_str(&format!("# {}\n{} = {}\n", d.doc, d.key, d.default));
        }
        out
    }

    /// Applies a config file over the current values.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|d| d.section == name) {
                    return Err(ConfigError(format!("line {}: unknown section `{name}`", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| ConfigError(format!("line {}: key `{}` outside a section", n + 1, key.trim())))?;
            self.set_key(sec, key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError(format!("override key `{}` is not section.key", path.trim())))?;
        self.set_key(section, key, value.trim())
    }

    pub fn set_key(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        if !known(section, key) {
            return Err(ConfigError(format!("unknown key `{section}.{key}`")));
        }
        self.values.insert((section.to_string(), key.to_string()), value.to_string());
        Ok(())
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("undeclared key {section}.{key}"))
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(section, key);
        v.parse()
            .map_err(|e| ConfigError(format!("`{section}.{key}` = `{v}`: {e}")))
    }

    fn families(&self, section: &str) -> Result<Vec<Family>> {
        let list: Vec<Family> = self
            .raw(section, "families")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| ConfigError(format!("`{section}.families`: {e}"))))
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(ConfigError(format!("`{section}.families` is empty")));
        }
        Ok(list)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let preset: Preset = self.get("model", "preset")?;
        let mut cfg = ModelConfig::desk(preset);
        let layers: usize = self.get("model", "layers")?;
        let hidden: usize = self.get("model", "hidden")?;
        if layers > 0 {
            cfg.num_layers = layers;
        }
        if hidden > 0 {
            cfg.hidden = hidden;
            cfg.heads = (hidden / 64).max(1);
            cfg.ffn_dim = 2 * hidden;
        }
        cfg.precision = match self.raw("model", "precision") {
            "single" => Precision::Single,
            "double" => Precision::Double,
            other => return Err(ConfigError(format!("`model.precision` = `{other}`: expected single or double"))),
        };
        cfg.seed = self.get("model", "seed")?;
        cfg.num_agent_queries = self.get("model", "agent_queries")?;
        cfg.num_map_queries = self.get("model", "map_queries")?;
        cfg.points_per_polyline = self.get("model", "points_per_polyline")?;
        cfg.queue_len = self.get("model", "queue_len")?;
        cfg.top_k = self.get("model", "top_k")?;
        cfg.dropout = self.get("train", "dropout")?;
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let schedule: Schedule = self.get("train", "schedule")?;
        let cfg = TrainConfig {
            lr: self.get("train", "lr")?,
            weight_decay: self.get("train", "weight_decay")?,
            dropout: self.get("train", "dropout")?,
            schedule,
            epochs: self.get("train", "epochs")?,
            steps: self.get("train", "steps")?,
            batch_size: self.get("train", "batch_size")?,
            seed: self.get("train", "seed")?,
            preset: self.get("model", "preset")?,
            grad_clip: self.get("train", "grad_clip")?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn world(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            families: self.families("world")?,
            clips: self.get("world", "clips")?,
            frames_per_clip: self.get("world", "frames_per_clip")?,
            clip_start: self.get("world", "clip_start")?,
            image_size: self.get("world", "image_size")?,
            seed: self.get("world", "seed")?,
        };
        spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(spec)
    }

    pub fn eval(&self) -> Result<EvalSettings> {
        let policy = self.raw("eval", "policy");
        if !["model", "expert", "zero"].contains(&policy) {
            return Err(ConfigError(format!("`eval.policy` = `{policy}`: expected model, expert or zero")));
        }
        Ok(EvalSettings {
            families: self.families("eval")?,
            scenarios: self.get("eval", "scenarios")?,
            episode_steps: self.get("eval", "episode_steps")?,
            seed: self.get("eval", "seed")?,
            clips: self.get("eval", "clips")?,
            policy: policy.to_string(),
            intensity: self.get("eval", "intensity")?,
            perturb_seed: self.get("eval", "perturb_seed")?,
        })
    }

    pub fn bench(&self) -> Result<BenchConfig> {
        let bc = BenchConfig {
            warmup: self.get("bench", "warmup")?,
            iters: self.get("bench", "iters")?,
            episode_steps: self.get("bench", "episode_steps")?,
            image_size: self.get("world", "image_size")?,
        };
        if bc.warmup < 3 {
            return Err(ConfigError(format!("`bench.warmup` = {} must be at least 3", bc.warmup)));
        }
        Ok(bc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub families: Vec<Family>,
    pub scenarios: usize,
    pub episode_steps: usize,
    pub seed: u64,
    pub clips: usize,
    pub policy: String,
    pub intensity: f64,
    pub perturb_seed: u64,
}

/// Defaults, then `file` (if any), then `overrides` in order.
pub fn load(file: Option<&str>, overrides: &[String]) -> Result<CliConfig> {
    let mut cfg = CliConfig::default();
    if let Some(text) = file {
        cfg.apply_file(text)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}
