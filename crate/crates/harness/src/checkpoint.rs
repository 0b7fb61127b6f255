//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `DTXF`, `u32` version, then length-prefixed
//! sections (config JSON, parameter table, optimizer moments, RNG state,
//! optional queue JSON) and a trailing FNV-1a 64 checksum of everything
//! before it.

use std::path::Path;

use dtx_core::losses::LossWeights;
use dtx_core::numerics::Tensor;
use dtx_core::temporal_memory::TemporalQueue;
use dtx_core::{DriveTransformer, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, TrainConfig};
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"DTXF";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    train: TrainConfig,
    weights: LossWeights,
    step: usize,
    adam: (f64, f64, f64, u64),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Corrupt(format!("length {n}")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn encode(t: &Trainer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let blob = ConfigBlob {
        model: t.model.cfg.clone(),
        train: t.cfg.clone(),
        weights: t.weights,
        step: t.step,
        adam: (t.opt.beta1, t.opt.beta2, t.opt.eps, t.opt.t),
    };
    w.bytes(&serde_json::to_vec(&blob)?);
    w.u64(t.model.store.len() as u64);
    for (id, name, tensor) in t.model.store.iter() {
        w.bytes(name.as_bytes());
        w.u64(tensor.shape().len() as u64);
        for &d in tensor.shape() {
            w.u64(d as u64);
        }
        w.f64s(tensor.data());
        w.f64s(&t.opt.m[id.0]);
        w.f64s(&t.opt.v[id.0]);
    }
    w.0.extend_from_slice(&t.rng.get_seed());
    w.u64(t.rng.get_stream());
    w.0.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    if t.queue.is_empty() {
        w.0.push(0);
    } else {
        w.0.push(1);
        w.bytes(&serde_json::to_vec(&t.queue)?);
    }
    let sum = fnv1a(&w.0);
    w.u64(sum);
    Ok(w.0)
}

pub fn decode(buf: &[u8]) -> Result<Trainer> {
    if buf.len() < 16 {
        return Err(Error::Corrupt("file too short".into()));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let blob: ConfigBlob = serde_json::from_slice(r.bytes()?)?;
    let mut model = DriveTransformer::new(blob.model)?;
    let n = r.len()?;
    if n != model.store.len() {
        return Err(Error::Corrupt(format!("{n} parameters, model has {}", model.store.len())));
    }
    let mut opt = AdamW::new(&model.store);
    (opt.beta1, opt.beta2, opt.eps, opt.t) = blob.adam;
    for _ in 0..n {
        let name = std::str::from_utf8(r.bytes()?).map_err(|e| Error::Corrupt(e.to_string()))?.to_string();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter `{name}`")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::Corrupt(format!("parameter `{name}` has shape {shape:?}")));
        }
        model.store.set(id, Tensor::new(shape, data)?)?;
        let (m, v) = (r.f64s()?, r.f64s()?);
        if m.len() != opt.m[id.0].len() || v.len() != opt.v[id.0].len() {
            return Err(Error::Corrupt(format!("optimizer state of `{name}`")));
        }
        opt.m[id.0] = m;
        opt.v[id.0] = v;
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.take(16)?.try_into().unwrap()));
    let queue: TemporalQueue = match r.take(1)?[0] {
        0 => model.new_queue(),
        1 => serde_json::from_slice(r.bytes()?)?,
        b => return Err(Error::Corrupt(format!("queue flag {b}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Trainer {
        model,
        cfg: blob.train,
        weights: blob.weights,
        opt,
        rng,
        step: blob.step,
        queue,
    })
}

pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    decode(&std::fs::read(path)?)
}
