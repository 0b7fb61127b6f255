//! Sensor, temporal and task attention composed into the stacked body.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{aggregate_map, decode_layer, refresh_pe, FramePredictions, HeadParams, LayerOutputs, ModeEmbedding, PointNetParams};
use crate::numerics::{concat_rows, mha, mlp_forward, Activation, AttentionParams, LayerNormParams, MlpParams, ParamStore, Tape, Var};
use crate::temporal_memory::{TaskKind, TemporalKv};
use crate::tokenizer::{QueryParams, SensorTokens, TaskQueries};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub sca: AttentionParams,
    pub tca: AttentionParams,
    pub tsa: AttentionParams,
    pub ffn: MlpParams,
    pub sca_norm: LayerNormParams,
    pub tca_norm: LayerNormParams,
    pub tsa_norm: LayerNormParams,
    pub ffn_norm: LayerNormParams,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            sca: AttentionParams::new(store, &format!("{name}.sca"), d, rng)?,
            tca: AttentionParams::new(store, &format!("{name}.tca"), d, rng)?,
            tsa: AttentionParams::new(store, &format!("{name}.tsa"), d, rng)?,
            ffn: MlpParams::new(store, &format!("{name}.ffn"), &[d, cfg.ffn_dim, d], Activation::Gelu, rng)?,
            sca_norm: LayerNormParams::new(store, &format!("{name}.sca_norm"), d)?,
            tca_norm: LayerNormParams::new(store, &format!("{name}.tca_norm"), d)?,
            tsa_norm: LayerNormParams::new(store, &format!("{name}.tsa_norm"), d)?,
            ffn_norm: LayerNormParams::new(store, &format!("{name}.ffn_norm"), d)?,
        })
    }

    /// Every parameter whose zeroing silences a sub-op's residual branch.
    pub fn output_projections(&self) -> Vec<crate::numerics::Linear> {
        vec![self.sca.output, self.tca.output, self.tsa.output, *self.ffn.last()]
    }
}

/// Inverted dropout applied to every residual branch while training.
#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
    pub rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: RefCell::new(rng) }
    }

    fn apply<'t>(drop: Option<&Dropout>, x: Var<'t>) -> Var<'t> {
        match drop {
            Some(d) if d.p > 0.0 => x.dropout(d.p, &mut *d.rng.borrow_mut()),
            _ => x,
        }
    }
}

/// The three query families stacked `[ego ‖ agent ‖ map]`, skipping empty ones.
fn stack_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let nonempty: Vec<Var<'t>> = parts.iter().copied().filter(|v| v.rows() > 0).collect();
    if nonempty.len() == 1 {
        nonempty[0]
    } else {
        concat_rows(&nonempty)
    }
}

fn split_rows<'t>(x: Var<'t>, counts: [usize; 3], fallback: [Var<'t>; 3]) -> [Var<'t>; 3] {
    let mut start = 0;
    let mut out = fallback;
    for (i, &n) in counts.iter().enumerate() {
        if n > 0 {
            out[i] = x.slice_rows(start, n);
            start += n;
        }
    }
    out
}

fn with_h<'t>(tq: &TaskQueries<'t>, ego: Var<'t>, agent: Var<'t>, map: Var<'t>) -> TaskQueries<'t> {
    TaskQueries {
        ego_h: ego,
        agent_h: agent,
        map_h: map,
        ..tq.clone()
    }
}

/// Joint attention of all (point-level) task queries over the sensor tokens.
pub fn sensor_cross_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    sensors: &SensorTokens<'t>,
    params: &BlockParams,
    heads: usize,
    drop: Option<&Dropout>,
) -> Result<TaskQueries<'t>> {
    if sensors.is_empty() {
        return Err(Error::InvalidArgument("sensor cross attention without tokens".into()));
    }
    let h = stack_rows(&[tq.ego_h, tq.agent_h, tq.map_h]);
    let pe = stack_rows(&[tq.ego_pe, tq.agent_pe, tq.map_pe]);
    let q = params.sca_norm.forward(tape, store, h)?.add(pe);
    let k = sensors.features.add(sensors.pe);
    let out = mha(tape, store, q, k, sensors.features, heads, &params.sca, None)?;
    let h = h.add(Dropout::apply(drop, out));
    let [e, a, m] = split_rows(
        h,
        [tq.ego_h.rows(), tq.agent_h.rows(), tq.map_h.rows()],
        [tq.ego_h, tq.agent_h, tq.map_h],
    );
    Ok(with_h(tq, e, a, m))
}

/// Each family attends its own history; families without history pass through.
pub fn temporal_cross_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    kv: &TemporalKv<'t>,
    params: &BlockParams,
    heads: usize,
    drop: Option<&Dropout>,
) -> Result<TaskQueries<'t>> {
    let step = |h: Var<'t>, pe: Var<'t>, kind: TaskKind| -> Result<Var<'t>> {
        match kv.get(kind) {
            Some(pair) if h.rows() > 0 => {
                let q = params.tca_norm.forward(tape, store, h)?.add(pe);
                let out = mha(tape, store, q, pair.keys, pair.values, heads, &params.tca, None)?;
                Ok(h.add(Dropout::apply(drop, out)))
            }
            _ => Ok(h),
        }
    };
    let ego = step(tq.ego_h, tq.ego_pe, TaskKind::Ego)?;
    let agent = step(tq.agent_h, tq.agent_pe, TaskKind::Agent)?;
    let map = step(tq.map_h, tq.map_pe, TaskKind::Map)?;
    Ok(with_h(tq, ego, agent, map))
}

/// Joint self attention over `[ego ‖ agents ‖ map instances]`; the map
/// instance update is broadcast back to its points.
pub fn task_self_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    params: &BlockParams,
    pointnet: &PointNetParams,
    heads: usize,
    drop: Option<&Dropout>,
) -> Result<TaskQueries<'t>> {
    let np = tq.points_per_polyline();
    let nm = tq.num_map();
    let ego_n = params.tsa_norm.forward(tape, store, tq.ego_h)?;
    let agent_n = if tq.agent_h.rows() > 0 {
        params.tsa_norm.forward(tape, store, tq.agent_h)?
    } else {
        tq.agent_h
    };
    let (map_inst, map_pe) = if nm > 0 {
        let normed = params.tsa_norm.forward(tape, store, tq.map_h)?;
        (aggregate_map(tape, store, normed, np, pointnet)?, tq.map_pe.segment_mean(np))
    } else {
        (tq.map_h, tq.map_pe)
    };
    let v = stack_rows(&[ego_n, agent_n, map_inst]);
    let qk = v.add(stack_rows(&[tq.ego_pe, tq.agent_pe, map_pe]));
    let out = Dropout::apply(drop, mha(tape, store, qk, qk, v, heads, &params.tsa, None)?);
    let [e, a, m] = split_rows(out, [1, tq.agent_h.rows(), nm], [out, out, out]);
    let ego = tq.ego_h.add(e);
    let agent = if tq.agent_h.rows() > 0 { tq.agent_h.add(a) } else { tq.agent_h };
    let map = if nm > 0 {
        let idx: Vec<usize> = (0..nm * np).map(|r| r / np).collect();
        tq.map_h.add(m.gather_rows(&idx))
    } else {
        tq.map_h
    };
    Ok(with_h(tq, ego, agent, map))
}

pub fn feed_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    params: &BlockParams,
    drop: Option<&Dropout>,
) -> Result<TaskQueries<'t>> {
    let h = stack_rows(&[tq.ego_h, tq.agent_h, tq.map_h]);
    let out = mlp_forward(tape, store, params.ffn_norm.forward(tape, store, h)?, &params.ffn)?;
    let h = h.add(Dropout::apply(drop, out));
    let [e, a, m] = split_rows(
        h,
        [tq.ego_h.rows(), tq.agent_h.rows(), tq.map_h.rows()],
        [tq.ego_h, tq.agent_h, tq.map_h],
    );
    Ok(with_h(tq, e, a, m))
}

/// SCA, TCA, TSA, FFN, each as `x + op(LN(x))`.
pub fn block_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq: &TaskQueries<'t>,
    sensors: &SensorTokens<'t>,
    kv: &TemporalKv<'t>,
    params: &BlockParams,
    pointnet: &PointNetParams,
    heads: usize,
    drop: Option<&Dropout>,
) -> Result<TaskQueries<'t>> {
    let x = sensor_cross_attention(tape, store, tq, sensors, params, heads, drop)?;
    let x = temporal_cross_attention(tape, store, &x, kv, params, heads, drop)?;
    let x = task_self_attention(tape, store, &x, params, pointnet, heads, drop)?;
    feed_forward(tape, store, &x, params, drop)
}

/// Per-block queries (after the block, before refresh) and head outputs.
#[derive(Clone, Debug)]
pub struct StackOutput<'t> {
    pub queries: Vec<TaskQueries<'t>>,
    pub layers: Vec<LayerOutputs<'t>>,
    pub predictions: Vec<FramePredictions>,
}

impl<'t> StackOutput<'t> {
    pub fn final_predictions(&self) -> &FramePredictions {
        self.predictions.last().expect("at least one block")
    }

    pub fn final_queries(&self) -> &TaskQueries<'t> {
        self.queries.last().expect("at least one block")
    }
}

/// Runs the blocks, decoding heads after each and refreshing anchors/PE
/// before the next.
pub fn stack_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    tq0: &TaskQueries<'t>,
    sensors: &SensorTokens<'t>,
    kv: &TemporalKv<'t>,
    blocks: &[BlockParams],
    head_params: &HeadParams,
    query_params: &QueryParams,
    cfg: &ModelConfig,
    drop: Option<&Dropout>,
) -> Result<StackOutput<'t>> {
    if blocks.is_empty() {
        return Err(Error::Config("model needs at least one block".into()));
    }
    let modes = ModeEmbedding::compute(tape, store, head_params, cfg.num_freqs)?;
    let mut tq = tq0.clone();
    let mut out = StackOutput {
        queries: Vec::with_capacity(blocks.len()),
        layers: Vec::with_capacity(blocks.len()),
        predictions: Vec::with_capacity(blocks.len()),
    };
    for (l, block) in blocks.iter().enumerate() {
        let next = block_forward(tape, store, &tq, sensors, kv, block, &head_params.pointnet, cfg.heads, drop)?;
        let layer = decode_layer(tape, store, &next, &modes, head_params, cfg)?;
        let preds = layer.to_predictions();
        if l + 1 < blocks.len() {
            tq = refresh_pe(tape, store, &next, &preds, query_params, cfg.num_freqs)?;
        }
        out.queries.push(next);
        out.layers.push(layer);
        out.predictions.push(preds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
