//! Forward latency and memory measurement.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use dtx_core::numerics::Tape;
use dtx_core::{DriveTransformer, ModelConfig};
use dtx_simworld::{default_cameras, generate_clip, generate_scenario, Family};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::frame_input;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Untimed forwards before measuring; at least 3.
    pub warmup: usize,
    pub iters: usize,
    /// Frames pushed through the queue before reading its size.
    pub episode_steps: usize,
    pub image_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            iters: 10,
            episode_steps: 20,
            image_size: dtx_simworld::dataset::IMAGE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub layers: usize,
    pub hidden: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Bytes of values alive on the inference tape after one forward.
    pub peak_live_bytes: usize,
    /// Bytes held by the temporal queue after `episode_steps` frames.
    pub queue_bytes: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "preset,layers,hidden,mean_ms,std_ms,peak_live_bytes,queue_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label, self.layers, self.hidden, self.mean_ms, self.std_ms, self.peak_live_bytes, self.queue_bytes
        )
    }
}

/// Times inference forwards of a model built from `cfg` on consecutive
/// frames of a straight-road clip. The queue streams real frame memories
/// during the timed part; the remaining episode steps replay the last one.
pub fn bench(label: &str, cfg: &ModelConfig, bc: &BenchConfig) -> Result<BenchRow> {
    if bc.warmup < 3 {
        return Err(Error::InvalidArgument(format!("warmup {} below 3", bc.warmup)));
    }
    if bc.iters == 0 {
        return Err(Error::InvalidArgument("iters must be positive".into()));
    }
    let model = DriveTransformer::new(cfg.clone())?;
    let frames = bc.warmup + bc.iters;
    let scn = generate_scenario(Family::Straight, 0);
    let frames = frames.min(scn.steps);
    let clip = generate_clip(scn, 0..frames, default_cameras(bc.image_size), cfg)?;
    let poses = clip.ego_poses();
    let mut queue = model.new_queue();
    let mut times = Vec::with_capacity(bc.iters);
    let mut peak = 0;
    let mut last_mem = None;
    for k in 0..bc.warmup + bc.iters {
        let f = k % clip.frames.len();
        if f == 0 {
            queue.clear();
        }
        let input = frame_input(&clip, f, &poses);
        let tape = Tape::inference(cfg.precision);
        let t0 = Instant::now();
        let out = model.forward(&tape, &input, &queue, None)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        peak = peak.max(tape.value_bytes());
        let mem = model.frame_memory(&out)?;
        queue.push_frame(&mem, cfg.top_k, input.step)?;
        last_mem = Some(mem);
        if k >= bc.warmup {
            times.push(dt);
        }
    }
    let mem = last_mem.expect("at least one forward");
    let mut q = model.new_queue();
    for t in 0..bc.episode_steps {
        q.push_frame(&mem, cfg.top_k, t as i64)?;
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(BenchRow {
        label: label.to_string(),
        layers: cfg.num_layers,
        hidden: cfg.hidden,
        mean_ms: mean,
        std_ms: var.sqrt(),
        peak_live_bytes: peak,
        queue_bytes: q.value_bytes(),
    })
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", BenchRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}
