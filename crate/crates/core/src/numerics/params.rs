use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Activation, Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(shape_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("xavier shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(store, self.weight))
            .add_bias(tape.param(store, self.bias))
    }
}

/// Stack of affine layers with an activation between consecutive layers
/// (never after the last one).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl MlpParams {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!("mlp `{name}` needs >= 2 dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        self.layers[0].in_dim(store)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        self.layers[self.layers.len() - 1].out_dim(store)
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    /// Checks that adjacent layer dimensions chain.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("mlp without layers".into()));
        }
        for l in &self.layers {
            let w = store.get(l.weight).shape();
            let b = store.get(l.bias).shape();
            if w.len() != 2 || b.len() != 1 || b[0] != w[1] {
                return Err(shape_err!("layer weight {:?} with bias {:?}", w, b));
            }
        }
        for pair in self.layers.windows(2) {
            let (a, b) = (pair[0].out_dim(store), pair[1].in_dim(store));
            if a != b {
                return Err(shape_err!("mlp layers do not chain: {a} -> {b}"));
            }
        }
        Ok(())
    }
}

/// Applies an MLP to the rows of `x`.
pub fn mlp_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: Var<'t>,
    params: &MlpParams,
) -> Result<Var<'t>> {
    params.validate(store)?;
    if x.cols() != params.in_dim(store) {
        return Err(shape_err!(
            "mlp expects {} input features, got {}",
            params.in_dim(store),
            x.cols()
        ));
    }
    let mut h = x;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(tape, store, h);
        if i + 1 < params.layers.len() {
            h = h.activate(params.activation);
        }
    }
    Ok(h)
}
