//! Bounded per-task history of query embeddings and their anchors.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{sincos_encode, Pose2, RigidTransform};
use crate::numerics::{ada_layer_norm, concat_rows, mlp_forward, Activation, MlpParams, ParamStore, Tape, Tensor, Var};

/// Geometric state stored next to a queued embedding, in the ego frame of
/// the step it was pushed at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    Agent {
        center: [f64; 3],
        heading: f64,
        velocity: [f64; 2],
    },
    Map(Vec<[f64; 2]>),
    Ego(Pose2),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Agent,
    Map,
    Ego,
}

/// Rows of one task family kept from one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub h: Tensor,
    pub anchors: Vec<Anchor>,
    pub confidence: Vec<f64>,
    pub timestamp: i64,
}

impl QueueEntry {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Final-block state of one frame, as handed to [`TemporalQueue::push_frame`].
/// Map rows are instance level.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMemory {
    pub agent_h: Tensor,
    pub agent_anchors: Vec<Anchor>,
    pub agent_scores: Vec<f64>,
    pub map_h: Tensor,
    pub map_anchors: Vec<Anchor>,
    pub map_scores: Vec<f64>,
    pub ego_h: Tensor,
}

/// FIFO queues, oldest entry at the front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalQueue {
    capacity: usize,
    agent: VecDeque<QueueEntry>,
    map: VecDeque<QueueEntry>,
    ego: VecDeque<QueueEntry>,
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn select_entry(h: &Tensor, anchors: &[Anchor], scores: &[f64], k: usize, t: i64) -> Result<QueueEntry> {
    if h.rows() != anchors.len() || scores.len() != anchors.len() {
        return Err(shape_err!(
            "{} embeddings, {} anchors, {} scores",
            h.rows(),
            anchors.len(),
            scores.len()
        ));
    }
    let keep = top_k(scores, k);
    let cols = h.cols();
    let mut data = Vec::with_capacity(keep.len() * cols);
    for &i in &keep {
        data.extend_from_slice(h.row(i));
    }
    Ok(QueueEntry {
        h: Tensor::matrix(keep.len(), cols, data)?,
        anchors: keep.iter().map(|&i| anchors[i].clone()).collect(),
        confidence: keep.iter().map(|&i| scores[i]).collect(),
        timestamp: t,
    })
}

impl TemporalQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Queue("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            agent: VecDeque::new(),
            map: VecDeque::new(),
            ego: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of queued frames (equal for every family).
    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }

    pub fn newest_timestamp(&self) -> Option<i64> {
        self.ego.back().map(|e| e.timestamp)
    }

    /// Entries of one family, newest first.
    pub fn entries(&self, kind: TaskKind) -> impl Iterator<Item = &QueueEntry> {
        match kind {
            TaskKind::Agent => self.agent.iter().rev(),
            TaskKind::Map => self.map.iter().rev(),
            TaskKind::Ego => self.ego.iter().rev(),
        }
    }

    /// Total queued rows over all families.
    pub fn num_rows(&self) -> usize {
        [&self.agent, &self.map, &self.ego]
            .iter()
            .flat_map(|q| q.iter())
            .map(QueueEntry::len)
            .sum()
    }

    /// Bytes held by queued embeddings.
    pub fn value_bytes(&self) -> usize {
        [&self.agent, &self.map, &self.ego]
            .iter()
            .flat_map(|q| q.iter())
            .map(|e| e.h.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Keeps the `k_keep` most confident agent and map rows (all ego rows),
    /// evicting the oldest frame when full.
    pub fn push_frame(&mut self, frame: &FrameMemory, k_keep: usize, t: i64) -> Result<()> {
        if let Some(last) = self.newest_timestamp() {
            if t <= last {
                return Err(Error::Queue(format!("step {t} pushed after step {last}")));
            }
        }
        let agent = select_entry(&frame.agent_h, &frame.agent_anchors, &frame.agent_scores, k_keep, t)?;
        let map = select_entry(&frame.map_h, &frame.map_anchors, &frame.map_scores, k_keep, t)?;
        if frame.ego_h.rows() != 1 {
            return Err(shape_err!("ego memory has {} rows", frame.ego_h.rows()));
        }
        let ego = QueueEntry {
            h: frame.ego_h.clone(),
            anchors: vec![Anchor::Ego(Pose2::default())],
            confidence: vec![1.0],
            timestamp: t,
        };
        for (q, e) in [(&mut self.agent, agent), (&mut self.map, map), (&mut self.ego, ego)] {
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(e);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.agent.clear();
        self.map.clear();
        self.ego.clear();
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub agent_pe: MlpParams,
    pub map_pe: MlpParams,
    pub ego_pe: MlpParams,
    /// Velocity-displacement condition to `gamma ‖ beta`.
    pub motion: MlpParams,
    pub time: MlpParams,
}

impl TemporalParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden;
        let f = cfg.num_freqs;
        let act = Activation::Relu;
        let motion = MlpParams::new(store, "temporal.motion", &[2, d, 2 * d], act, rng)?;
        let bias = motion.last().bias;
        let mut b = store.get(bias).clone();
        b.data_mut()[..d].fill(1.0);
        store.set(bias, b)?;
        Ok(Self {
            agent_pe: MlpParams::new(store, "temporal.agent_pe", &[6 * f, d, d], act, rng)?,
            map_pe: MlpParams::new(store, "temporal.map_pe", &[4 * f * cfg.points_per_polyline, d, d], act, rng)?,
            ego_pe: MlpParams::new(store, "temporal.ego_pe", &[6 * f, d, d], act, rng)?,
            motion,
            time: MlpParams::new(store, "temporal.time", &[1, d, d], act, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KvPair<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

/// History keys/values per family; `None` when that history is empty.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemporalKv<'t> {
    pub agent: Option<KvPair<'t>>,
    pub map: Option<KvPair<'t>>,
    pub ego: Option<KvPair<'t>>,
}

impl<'t> TemporalKv<'t> {
    pub fn get(&self, kind: TaskKind) -> Option<KvPair<'t>> {
        match kind {
            TaskKind::Agent => self.agent,
            TaskKind::Map => self.map,
            TaskKind::Ego => self.ego,
        }
    }
}

/// Maps the ego frame at `t` into the ego frame at `t0`.
pub fn relative_transform(ego_poses: &BTreeMap<i64, RigidTransform>, t: i64, t0: i64) -> Result<RigidTransform> {
    let get = |s: i64| {
        ego_poses
            .get(&s)
            .ok_or_else(|| Error::Queue(format!("no ego pose for step {s}")))
    };
    Ok(get(t0)?.inverse().compose(get(t)?))
}

/// Anchor geometry re-expressed in the current ego frame.
pub fn transform_anchor(anchor: &Anchor, tf: &RigidTransform) -> Anchor {
    match anchor {
        Anchor::Agent { center, heading, velocity } => {
            let c = tf.apply(&Vector3::new(center[0], center[1], center[2]));
            let v = tf.apply_vector(&Vector3::new(velocity[0], velocity[1], 0.0));
            Anchor::Agent {
                center: [c.x, c.y, c.z],
                heading: crate::geometry::wrap_angle(heading + tf.yaw()),
                velocity: [v.x, v.y],
            }
        }
        Anchor::Map(points) => Anchor::Map(
            points
                .iter()
                .map(|p| {
                    let q = tf.apply(&Vector3::new(p[0], p[1], 0.0));
                    [q.x, q.y]
                })
                .collect(),
        ),
        Anchor::Ego(pose) => {
            let q = tf.apply(&Vector3::new(pose.x, pose.y, 0.0));
            Anchor::Ego(Pose2::new(q.x, q.y, crate::geometry::wrap_angle(pose.yaw + tf.yaw())))
        }
    }
}

/// Input row of the PE encoder for an already transformed anchor.
pub fn anchor_pe_input(anchor: &Anchor, num_freqs: usize) -> Vec<f64> {
    match anchor {
        Anchor::Agent { center, .. } => sincos_encode(center, num_freqs),
        Anchor::Map(points) => {
            let flat: Vec<f64> = points.iter().flatten().copied().collect();
            sincos_encode(&flat, num_freqs)
        }
        Anchor::Ego(pose) => sincos_encode(&[pose.x, pose.y, 0.0], num_freqs),
    }
}

fn family_kv<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    kind: TaskKind,
    queue: &TemporalQueue,
    t0: i64,
    ego_poses: &BTreeMap<i64, RigidTransform>,
    params: &TemporalParams,
    cfg: &ModelConfig,
) -> Result<Option<KvPair<'t>>> {
    let entries: Vec<&QueueEntry> = queue.entries(kind).filter(|e| !e.is_empty()).collect();
    if entries.is_empty() {
        return Ok(None);
    }
    let d = cfg.hidden;
    let mut pe_rows = Vec::new();
    let mut cond_rows = Vec::new();
    let mut dts = Vec::new();
    let mut entry_of_row = Vec::new();
    let mut h_data = Vec::new();
    for (ei, e) in entries.iter().enumerate() {
        if e.timestamp >= t0 {
            return Err(Error::Queue(format!("entry at step {} read at step {t0}", e.timestamp)));
        }
        if e.h.cols() != d {
            return Err(shape_err!("queued embedding width {} vs hidden {d}", e.h.cols()));
        }
        let tf = relative_transform(ego_poses, e.timestamp, t0)?;
        let dt = (e.timestamp - t0) as f64 * cfg.frame_period;
        dts.push(vec![dt]);
        for a in &e.anchors {
            let moved = transform_anchor(a, &tf);
            pe_rows.push(anchor_pe_input(&moved, cfg.num_freqs));
            if let Anchor::Agent { velocity, .. } = moved {
                cond_rows.push(vec![velocity[0] * dt, velocity[1] * dt]);
            }
            entry_of_row.push(ei);
        }
        h_data.extend_from_slice(e.h.data());
    }
    let encoder = match kind {
        TaskKind::Agent => &params.agent_pe,
        TaskKind::Map => &params.map_pe,
        TaskKind::Ego => &params.ego_pe,
    };
    let mut pe = mlp_forward(tape, store, tape.constant(Tensor::from_rows(&pe_rows)?), encoder)?;
    if kind == TaskKind::Agent {
        let cond = tape.constant(Tensor::from_rows(&cond_rows)?);
        pe = ada_layer_norm(tape, store, pe, cond, &params.motion)?;
    }
    let t_emb = mlp_forward(tape, store, tape.constant(Tensor::from_rows(&dts)?), &params.time)?;
    let t_emb = t_emb.gather_rows(&entry_of_row);
    let values = tape.constant(Tensor::matrix(entry_of_row.len(), d, h_data)?);
    Ok(Some(KvPair {
        keys: values.add(pe).add(t_emb),
        values,
    }))
}

/// Keys `h + PE-hat + t_emb` and values `h` for temporal cross attention,
/// newest entries first.
pub fn build_temporal_kv<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    queue: &TemporalQueue,
    t0: i64,
    ego_poses: &BTreeMap<i64, RigidTransform>,
    params: &TemporalParams,
    cfg: &ModelConfig,
) -> Result<TemporalKv<'t>> {
    Ok(TemporalKv {
        agent: family_kv(tape, store, TaskKind::Agent, queue, t0, ego_poses, params, cfg)?,
        map: family_kv(tape, store, TaskKind::Map, queue, t0, ego_poses, params, cfg)?,
        ego: family_kv(tape, store, TaskKind::Ego, queue, t0, ego_poses, params, cfg)?,
    })
}

/// Concatenated keys of all families (agent, map, ego order).
pub fn all_keys<'t>(kv: &TemporalKv<'t>) -> Option<Var<'t>> {
    let parts: Vec<Var<'t>> = [kv.agent, kv.map, kv.ego].iter().flatten().map(|p| p.keys).collect();
    (!parts.is_empty()).then(|| concat_rows(&parts))
}
