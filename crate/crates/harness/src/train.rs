//! One-stage training with deep supervision over streaming clips.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use dtx_core::geometry::RigidTransform;
use dtx_core::losses::{total_loss, LossValues, LossWeights};
use dtx_core::numerics::Tape;
use dtx_core::temporal_memory::TemporalQueue;
use dtx_core::transformer_blocks::Dropout;
use dtx_core::{DriveTransformer, FrameInput, ModelConfig};
use dtx_simworld::Clip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::frame_order;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, TrainConfig};

/// Model, optimizer and every piece of state needed to continue a run
/// exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DriveTransformer,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub opt: AdamW,
    /// Dropout stream.
    pub rng: ChaCha8Rng,
    /// Completed optimizer updates.
    pub step: usize,
    /// Memory of the frames already consumed in the current clip.
    pub queue: TemporalQueue,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let model_cfg = ModelConfig {
            dropout: cfg.dropout,
            ..model_cfg
        };
        let model = DriveTransformer::new(model_cfg)?;
        Ok(Self {
            opt: AdamW::new(&model.store),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            queue: model.new_queue(),
            model,
            cfg,
            weights,
            step: 0,
        })
    }

    /// One optimizer update over the next `batch_size` frames of the
    /// streaming order. The schedule length comes from the config, so a run
    /// stopped early and resumed follows the same learning-rate curve.
    pub fn train_step(&mut self, clips: &[Clip]) -> Result<LossValues> {
        let order = frame_order(clips);
        if order.is_empty() {
            return Err(Error::InvalidArgument("training on an empty dataset".into()));
        }
        let total = self.cfg.total_steps(order.len());
        let b = self.cfg.batch_size;
        let mut grads: Vec<Vec<f64>> = self.model.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let mut values = LossValues::default();
        for i in 0..b {
            let (c, f) = order[(self.step * b + i) % order.len()];
            if f == 0 {
                self.queue.clear();
            }
            let clip = &clips[c];
            let frame = &clip.frames[f];
            let poses = clip.ego_poses();
            let tape = Tape::with_precision(self.model.cfg.precision);
            let drop = Dropout::new(self.cfg.dropout, self.rng.clone());
            let input = frame_input(clip, f, &poses);
            let out = self.model.forward(&tape, &input, &self.queue, Some(&drop)).map_err(|e| self.lift(e))?;
            self.rng = drop.rng.into_inner();
            let loss = total_loss(&out.layers, &frame.labels, &self.weights, &self.model.cfg).map_err(|e| self.lift(e))?;
            if !loss.values.total.is_finite() {
                return Err(self.non_finite(format!("loss {:?} on clip {c} frame {f}", loss.values)));
            }
            tape.check_finite().map_err(|e| self.non_finite(format!("{e} on clip {c} frame {f}")))?;
            let g = tape.backward(loss.total)?;
            for (id, gp) in g.params() {
                for (acc, v) in grads[id.0].iter_mut().zip(gp) {
                    *acc += v / b as f64;
                }
            }
            let mem = self.model.frame_memory(&out)?;
            self.queue.push_frame(&mem, self.model.cfg.top_k, frame.step as i64)?;
            accumulate(&mut values, &loss.values, 1.0 / b as f64);
        }
        let norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if !norm.is_finite() {
            return Err(self.non_finite(format!("gradient norm {norm}")));
        }
        let lr = self.cfg.lr_at(self.step, total);
        self.opt.step(&mut self.model.store, &grads, lr, self.cfg.weight_decay)?;
        if let Some((_, name, _)) = self.model.store.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(self.non_finite(format!("parameter `{name}` after update")));
        }
        self.step += 1;
        Ok(values)
    }

    /// Core non-finite failures abort the run like any other divergence.
    fn lift(&self, e: dtx_core::Error) -> Error {
        match e {
            dtx_core::Error::NonFinite(what) => self.non_finite(what),
            other => other.into(),
        }
    }

    fn non_finite(&self, detail: String) -> Error {
        Error::NonFinite {
            step: self.step,
            detail,
        }
    }

    /// Runs updates until `self.step == until`, calling `on_step` after each.
    pub fn train_until(
        &mut self,
        clips: &[Clip],
        until: usize,
        mut on_step: impl FnMut(usize, &LossValues),
    ) -> Result<Vec<LossValues>> {
        let mut curve = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            let v = self.train_step(clips)?;
            on_step(self.step - 1, &v);
            curve.push(v);
        }
        Ok(curve)
    }
}

fn accumulate(acc: &mut LossValues, v: &LossValues, k: f64) {
    acc.detection += k * v.detection;
    acc.motion += k * v.motion;
    acc.mapping += k * v.mapping;
    acc.planning += k * v.planning;
    acc.map_regression += k * v.map_regression;
    acc.total += k * v.total;
}

/// Model input for frame `f` of `clip`.
pub fn frame_input<'a>(clip: &'a Clip, f: usize, poses: &'a BTreeMap<i64, RigidTransform>) -> FrameInput<'a> {
    let frame = &clip.frames[f];
    FrameInput {
        images: &frame.images,
        cameras: &clip.cameras,
        canbus: frame.labels.canbus,
        step: frame.step as i64,
        ego_poses: poses,
    }
}

/// Trains a fresh model for the configured number of steps.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    clips: &[Clip],
    on_step: impl FnMut(usize, &LossValues),
) -> Result<(Trainer, Vec<LossValues>)> {
    if clips.iter().all(|c| c.frames.is_empty()) {
        return Err(Error::InvalidArgument("training on an empty dataset".into()));
    }
    let mut t = Trainer::new(model_cfg, cfg, weights)?;
    let total = t.cfg.total_steps(frame_order(clips).len());
    let curve = t.train_until(clips, total, on_step)?;
    Ok((t, curve))
}

pub fn write_loss_curve(path: &Path, curve: &[LossValues]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", LossValues::CSV_HEADER)?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(w, "{}", v.csv_row(i))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of the `window` values ending at index `end` (inclusive).
pub fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    let lo = (end + 1).saturating_sub(window);
    let s = &xs[lo..=end];
    s.iter().sum::<f64>() / s.len() as f64
}
