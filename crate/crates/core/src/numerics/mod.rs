//! Differentiable tensor substrate: values, a reverse-mode tape, parameter
//! storage and the handful of composite layers the model is built from.

mod params;
mod tape;
mod tensor;

pub use params::{mlp_forward, xavier_uniform, Linear, MlpParams, ParamId, ParamStore};
pub use tape::{concat_cols, concat_rows, Activation, Gradients, Tape, Var, LAYER_NORM_EPS, MASKED_LOGIT};
pub use tensor::{Precision, Tensor};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Softmax of a plain tensor along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.softmax(axis)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

/// Row-wise layer norm followed by the affine map `gamma * x + beta`.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let d = x.cols();
    if gamma.value().len() != d || beta.value().len() != d {
        return Err(shape_err!(
            "layer_norm over {d} features with gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(x.layer_norm().mul_cols(gamma).add_bias(beta))
}

/// Layer norm whose scale and shift are predicted from `condition`.
///
/// `params` maps each condition row to `gamma ‖ beta` (twice the feature
/// width). A single condition row modulates every row of `x`; otherwise the
/// condition must have one row per row of `x`.
pub fn ada_layer_norm<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: Var<'t>,
    condition: Var<'t>,
    params: &MlpParams,
) -> Result<Var<'t>> {
    let d = x.cols();
    if params.out_dim(store) != 2 * d {
        return Err(shape_err!(
            "ada-LN mlp emits {} values, need {}",
            params.out_dim(store),
            2 * d
        ));
    }
    let cond_rows = condition.rows();
    if cond_rows != 1 && cond_rows != x.rows() {
        return Err(shape_err!(
            "ada-LN condition has {cond_rows} rows for {} inputs",
            x.rows()
        ));
    }
    let gb = mlp_forward(tape, store, condition, params)?;
    let gamma = gb.slice_cols(0, d);
    let beta = gb.slice_cols(d, d);
    let normed = x.layer_norm();
    if cond_rows == 1 {
        Ok(normed.mul_cols(gamma).add_bias(beta))
    } else {
        Ok(normed.mul(gamma).add(beta))
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }
}

/// Boolean `queries x keys` matrix; `true` lets a query attend to a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all_pass(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    fn blocked(&self) -> Vec<usize> {
        self.allowed
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (!a).then_some(i))
            .collect()
    }
}

/// Scaled dot-product multi-head attention with input and output projections.
pub fn mha<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    params: &AttentionParams,
    mask: Option<&AttentionMask>,
) -> Result<Var<'t>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("model dim {d} not divisible by {heads} heads"));
    }
    if k.cols() != d || v.cols() != d {
        return Err(shape_err!(
            "attention dims: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if k.rows() != v.rows() {
        return Err(shape_err!("{} keys but {} values", k.rows(), v.rows()));
    }
    if k.rows() == 0 {
        return Err(Error::InvalidArgument("attention over an empty key set".into()));
    }
    let blocked = match mask {
        Some(m) => {
            if m.queries != q.rows() || m.keys != k.rows() || m.allowed.len() != m.queries * m.keys {
                return Err(shape_err!(
                    "mask {}x{} for {} queries, {} keys",
                    m.queries,
                    m.keys,
                    q.rows(),
                    k.rows()
                ));
            }
            m.blocked()
        }
        None => Vec::new(),
    };
    let qp = params.query.forward(tape, store, q);
    let kp = params.key.forward(tape, store, k);
    let vp = params.value.forward(tape, store, v);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let per_head: Vec<Var<'t>> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    qp.slice_cols(h * dh, dh),
                    kp.slice_cols(h * dh, dh),
                    vp.slice_cols(h * dh, dh),
                )
            };
            qh.matmul_nt(kh).scale(scale).mask_fill(&blocked).softmax().matmul(vh)
        })
        .collect();
    let joined = if heads == 1 { per_head[0] } else { concat_cols(&per_head) };
    Ok(params.output.forward(tape, store, joined))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&tape, xv)?;
    if !y.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.input(t);
        let y = f(&tape, v)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] for one stored parameter, restricted to `coords`
/// (all coordinates when `None`).
pub fn grad_check_param<F>(
    store: &ParamStore,
    id: ParamId,
    coords: Option<&[usize]>,
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let y = f(&tape, store)?;
    let grads = tape.backward(y)?;
    let n = store.get(id).len();
    let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let all: Vec<usize> = (0..n).collect();
    let coords = coords.unwrap_or(&all);
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for &i in coords {
        let orig = store.get(id).data()[i];
        let mut at = |v: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[i] = v;
            let tape = Tape::inference(Precision::Double);
            let y = f(&tape, &work)?.item();
            if !y.is_finite() {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            Ok(y)
        };
        let numeric = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
        work.get_mut(id).data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
