//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Tape`] lives for one forward/backward pass. Every operation appends a
//! node holding its value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Values are never mutated after they are recorded.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Layout, Precision, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance in every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MulCols(usize, usize),
    Scale(usize, f64),
    Act(usize, Activation),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { src: usize, inv_std: Vec<f64> },
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { src: usize, start: usize },
    ConcatRows(Vec<usize>),
    GatherRows { src: usize, index: Vec<usize> },
    SegmentMax { src: usize, argmax: Vec<usize> },
    SegmentMean { src: usize, group: usize },
    Sum(usize),
    Abs(usize),
    Select { src: usize, index: Vec<usize> },
    Reshape(usize),
    MaskFill { src: usize, blocked: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Create one per training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    precision: Precision,
    nonfinite: RefCell<Option<String>>,
    grad_enabled: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            precision,
            nonfinite: RefCell::new(None),
            grad_enabled: Cell::new(true),
        }
    }

    /// Tape that records values only; parameters are bound as constants.
    pub fn inference(precision: Precision) -> Self {
        let t = Self::with_precision(precision);
        t.grad_enabled.set(false);
        t
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total bytes of live recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Errors if any recorded op produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite.borrow().as_ref() {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var<'_> {
        if !value.is_finite() {
            let mut nf = self.nonfinite.borrow_mut();
            if nf.is_none() {
                *nf = Some(name.to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad: needs_grad && self.grad_enabled.get(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true, "param");
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop(self.precision, &nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let bound = self.bound.borrow();
        for (id, g) in grads.iter_mut().enumerate() {
            if g.is_some() && !nodes[id].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            params: bound.clone(),
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|&n| self.grads[n].as_deref())
    }

    /// Parameter gradients in id order.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut v: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&p, &n)| self.grads[n].as_deref().map(|g| (p, g)))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(
    precision: Precision,
    nodes: &[Node],
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(precision, m, n, k, g, Layout::rowmajor(n), bv.data(), Layout::transposed(n), ga, true);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm(precision, k, m, n, av.data(), Layout::transposed(k), g, Layout::rowmajor(n), gb, true);
            }
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(precision, m, n, k, g, Layout::rowmajor(n), bv.data(), Layout::rowmajor(k), ga, true);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm(precision, n, m, k, g, Layout::transposed(n), av.data(), Layout::rowmajor(k), gb, true);
            }
        }
        Op::Add(a, b) => {
            for src in [*a, *b] {
                if let Some(ga) = acc(grads, nodes, src) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += y * w;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += y * w;
                }
            }
        }
        Op::AddBias(a, b) => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MulCols(a, s) => {
            let cols = out.cols();
            let (av, sv) = (nodes[*a].value.clone(), nodes[*s].value.clone());
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, row) in g.chunks(cols).enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] += row[c] * sv.data()[c];
                    }
                }
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                for (r, row) in g.chunks(cols).enumerate() {
                    for c in 0..cols {
                        gs[c] += row[c] * av.data()[r * cols + c];
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        Op::Act(a, act) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (((x, y), xi), yi) in ga.iter_mut().zip(g).zip(av.data()).zip(out.data()) {
                    *x += y * act.derivative(*xi, *yi);
                }
            }
        }
        Op::Softmax(a) => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, (grow, yrow)) in g.chunks(cols).zip(out.data().chunks(cols)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += yrow[c] * (grow[c] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, (grow, yrow)) in g.chunks(cols).zip(out.data().chunks(cols)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += grow[c] - yrow[c].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { src, inv_std } => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *src) {
                let n = cols as f64;
                for (r, (grow, yrow)) in g.chunks(cols).zip(out.data().chunks(cols)).enumerate() {
                    let mean_g: f64 = grow.iter().sum::<f64>() / n;
                    let mean_gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        ga[r * cols + c] += inv_std[r] * (grow[c] - mean_g - yrow[c] * mean_gy);
                    }
                }
            }
        }
        Op::SliceCols { src, start } => {
            let src_cols = nodes[*src].value.cols();
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *src) {
                for (r, row) in g.chunks(cols).enumerate() {
                    let base = r * src_cols + start;
                    ga[base..base + cols].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        gp[r * pc..(r + 1) * pc]
                            .iter_mut()
                            .zip(&row[offset..offset + pc])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += pc;
            }
        }
        Op::SliceRows { src, start } => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *src) {
                let base = start * cols;
                ga[base..base + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        Op::GatherRows { src, index } => {
            let cols = out.cols();
            if let Some(ga) = acc(grads, nodes, *src) {
                for (r, &s) in index.iter().enumerate() {
                    for c in 0..cols {
                        ga[s * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::SegmentMax { src, argmax } => {
            if let Some(ga) = acc(grads, nodes, *src) {
                for (o, &s) in argmax.iter().enumerate() {
                    ga[s] += g[o];
                }
            }
        }
        Op::SegmentMean { src, group } => {
            let cols = out.cols();
            let scale = 1.0 / *group as f64;
            if let Some(ga) = acc(grads, nodes, *src) {
                for (r, row) in ga.chunks_mut(cols).enumerate() {
                    let o = r / group;
                    for c in 0..cols {
                        row[c] += scale * g[o * cols + c];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Abs(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += y * if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        Op::Select { src, index } => {
            if let Some(ga) = acc(grads, nodes, *src) {
                for (o, &s) in index.iter().enumerate() {
                    ga[s] += g[o];
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::MaskFill { src, blocked } => {
            if let Some(ga) = acc(grads, nodes, *src) {
                let mut gg = g.to_vec();
                for &b in blocked {
                    gg[b] = 0.0;
                }
                ga.iter_mut().zip(gg).for_each(|(x, y)| *x += y);
            }
        }
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
}

/// Value used in place of -inf for blocked attention logits.
pub const MASKED_LOGIT: f64 = -1e30;

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    /// The single entry of a scalar value.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Copy of the value as a constant leaf (gradient stops here).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(b.rows(), k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(self.tape.precision, m, k, n, a.data(), Layout::rowmajor(k), b.data(), Layout::rowmajor(n), &mut out, false);
        let ng = self.needs() || other.needs();
        self.tape.push(mat(m, n, out), Op::MatMul(self.id, other.id), ng, "matmul")
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        assert_eq!(b.cols(), k, "matmul_nt inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(self.tape.precision, m, k, n, a.data(), Layout::rowmajor(k), b.data(), Layout::transposed(k), &mut out, false);
        let ng = self.needs() || other.needs();
        self.tape.push(mat(m, n, out), Op::MatMulNT(self.id, other.id), ng, "matmul_nt")
    }

    fn zip_with(&self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len(), "{name}: {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.needs() || other.needs();
        let shape = a.shape().to_vec();
        self.tape.push(Tensor::new(shape, data).expect("same len"), op, ng, name)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, |x, y| x + y, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, |x, y| x - y, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, |x, y| x * y, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let (a, b) = (self.value(), bias.value());
        let cols = a.cols();
        assert_eq!(b.len(), cols, "add_bias: {:?} + {:?}", a.shape(), b.shape());
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        let ng = self.needs() || bias.needs();
        self.tape.push(mat(a.rows(), cols, data), Op::AddBias(self.id, bias.id), ng, "add_bias")
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_cols(&self, scale: Var<'t>) -> Var<'t> {
        self.same_tape(&scale);
        let (a, s) = (self.value(), scale.value());
        let cols = a.cols();
        assert_eq!(s.len(), cols, "mul_cols: {:?} * {:?}", a.shape(), s.shape());
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(s.data()).for_each(|(x, y)| *x *= y);
        }
        let ng = self.needs() || scale.needs();
        self.tape.push(mat(a.rows(), cols, data), Op::MulCols(self.id, scale.id), ng, "mul_cols")
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let a = self.value();
        let t = a.map(|v| v * s);
        self.tape.push(t, Op::Scale(self.id, s), self.needs(), "scale")
    }

    pub fn activate(&self, act: Activation) -> Var<'t> {
        if act == Activation::Identity {
            return *self;
        }
        let a = self.value();
        let t = a.map(|v| act.apply(v));
        self.tape.push(t, Op::Act(self.id, act), self.needs(), "activation")
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.tape.push(mat(a.rows(), cols, data), Op::Softmax(self.id), self.needs(), "softmax")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.tape.push(mat(a.rows(), cols, data), Op::LogSoftmax(self.id), self.needs(), "log_softmax")
    }

    /// Per-row normalization to zero mean, unit variance (before any affine).
    pub fn layer_norm(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let n = cols as f64;
        let mut data = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.tape.push(
            mat(a.rows(), cols, data),
            Op::LayerNorm { src: self.id, inv_std },
            self.needs(),
            "layer_norm",
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert!(start + len <= cols, "slice_cols {start}+{len} > {cols}");
        let mut data = Vec::with_capacity(a.rows() * len);
        for row in a.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.tape.push(mat(a.rows(), len, data), Op::SliceCols { src: self.id, start }, self.needs(), "slice_cols")
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert!(start + len <= a.rows(), "slice_rows {start}+{len} > {}", a.rows());
        let data = a.data()[start * cols..(start + len) * cols].to_vec();
        self.tape.push(mat(len, cols, data), Op::SliceRows { src: self.id, start }, self.needs(), "slice_rows")
    }

    /// Rows picked (with repetition allowed) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            data.extend_from_slice(a.row(r));
        }
        self.tape.push(
            mat(index.len(), cols, data),
            Op::GatherRows { src: self.id, index: index.to_vec() },
            self.needs(),
            "gather_rows",
        )
    }

    /// Elementwise max over consecutive groups of `group` rows.
    pub fn segment_max(&self, group: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert!(group > 0 && a.rows() % group == 0, "segment_max group {group} vs rows {}", a.rows());
        let out_rows = a.rows() / group;
        let mut data = vec![f64::NEG_INFINITY; out_rows * cols];
        let mut argmax = vec![0usize; out_rows * cols];
        for r in 0..a.rows() {
            let o = r / group;
            for c in 0..cols {
                let v = a.data()[r * cols + c];
                if v > data[o * cols + c] {
                    data[o * cols + c] = v;
                    argmax[o * cols + c] = r * cols + c;
                }
            }
        }
        self.tape.push(mat(out_rows, cols, data), Op::SegmentMax { src: self.id, argmax }, self.needs(), "segment_max")
    }

    /// Elementwise mean over consecutive groups of `group` rows.
    pub fn segment_mean(&self, group: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert!(group > 0 && a.rows() % group == 0, "segment_mean group {group} vs rows {}", a.rows());
        let out_rows = a.rows() / group;
        let mut data = vec![0.0; out_rows * cols];
        for r in 0..a.rows() {
            let o = r / group;
            for c in 0..cols {
                data[o * cols + c] += a.data()[r * cols + c];
            }
        }
        let s = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= s);
        self.tape.push(mat(out_rows, cols, data), Op::SegmentMean { src: self.id, group }, self.needs(), "segment_mean")
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.needs(), "sum")
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn abs(&self) -> Var<'t> {
        let t = self.value().map(f64::abs);
        self.tape.push(t, Op::Abs(self.id), self.needs(), "abs")
    }

    /// Flat-indexed elements as a vector.
    pub fn select(&self, index: &[usize]) -> Var<'t> {
        let a = self.value();
        let data = index.iter().map(|&i| a.data()[i]).collect();
        self.tape.push(
            Tensor::vector(data),
            Op::Select { src: self.id, index: index.to_vec() },
            self.needs(),
            "select",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let t = self.value().reshape(shape).expect("reshape element count");
        self.tape.push(t, Op::Reshape(self.id), self.needs(), "reshape")
    }

    /// Replaces flat positions in `blocked` by a large negative logit.
    /// An empty block list leaves the value bit-identical.
    pub fn mask_fill(&self, blocked: &[usize]) -> Var<'t> {
        if blocked.is_empty() {
            return *self;
        }
        let mut t = (*self.value()).clone();
        for &b in blocked {
            t.data_mut()[b] = MASKED_LOGIT;
        }
        self.tape.push(t, Op::MaskFill { src: self.id, blocked: blocked.to_vec() }, self.needs(), "mask_fill")
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Var<'t> {
        if p <= 0.0 {
            return *self;
        }
        let a = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(a.shape().to_vec(), mask).expect("same len"));
        self.mul(m)
    }
}

/// Concatenates along the last axis; all parts need the same row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = vals[0].rows();
    let cols: usize = vals.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for v in &vals {
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            data.extend_from_slice(v.row(r));
        }
    }
    let ng = parts.iter().any(|p| p.needs());
    tape.push(mat(rows, cols, data), Op::ConcatCols(parts.iter().map(|p| p.id).collect()), ng, "concat_cols")
}

/// Stacks along the first axis; all parts need the same column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let cols = vals[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for v in &vals {
        assert_eq!(v.cols(), cols, "concat_rows col mismatch");
        data.extend_from_slice(v.data());
        rows += v.rows();
    }
    let ng = parts.iter().any(|p| p.needs());
    tape.push(mat(rows, cols, data), Op::ConcatRows(parts.iter().map(|p| p.id).collect()), ng, "concat_rows")
}
