//! A small reverse-mode tape for the classical parts of the model, with a
//! node type that routes cotangents through the quantum circuit by the
//! adjoint sweep.
//!
//! Every value is a flat `f64` vector (weights carry a 2-D shape). Nodes are
//! recorded in execution order and visited once, in reverse, by
//! [`Tape::backward`]. Parameter leaves read from a [`ParamStore`] without
//! copying; their gradients are summed into a [`Gradients`] buffer aligned
//! with the store, so repeated use across timesteps accumulates.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use statrs::function::erf::erf;

use crate::ansatz::{accumulate_readout_cotangent, readout, CircuitLayout};
use crate::error::{check_dim, Error, Result};
use crate::statevector::QuantumState;

pub type ParamId = usize;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        check_dim("parameter size", shape.iter().product(), values.len())?;
        if self.id(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            requires_grad: true,
        });
        Ok(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Index of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads.iter().position(|g| g.iter().any(|x| !x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Gelu,
    /// Gated linear unit: splits the input into halves `[a; b]` and returns
    /// `a * sigmoid(b)`.
    Glu,
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Glu => "glu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }

    /// Width of the pre-activation needed to produce `out` outputs.
    pub fn input_width(self, out: usize) -> usize {
        match self {
            ActivationKind::Glu => 2 * out,
            _ => out,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "relu" => ActivationKind::Relu,
            "leaky_relu" | "leakyrelu" => ActivationKind::LeakyRelu,
            "gelu" => ActivationKind::Gelu,
            "glu" => ActivationKind::Glu,
            "tanh" => ActivationKind::Tanh,
            "identity" | "linear" => ActivationKind::Identity,
            _ => return Err(Error::Config(format!("unknown activation `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeluVariant {
    /// `x * Phi(x)` with the exact normal CDF.
    Erf,
    /// The tanh approximation.
    Tanh,
}

impl FromStr for GeluVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erf" => Ok(GeluVariant::Erf),
            "tanh" => Ok(GeluVariant::Tanh),
            _ => Err(Error::Config(format!("unknown gelu variant `{s}`"))),
        }
    }
}

impl fmt::Display for GeluVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeluVariant::Erf => "erf",
            GeluVariant::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub leaky_slope: f64,
    pub gelu: GeluVariant,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            leaky_slope: 0.01,
            gelu: GeluVariant::Erf,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.kind {
            ActivationKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            ActivationKind::LeakyRelu => x
                .iter()
                .map(|&v| if v > 0.0 { v } else { self.leaky_slope * v })
                .collect(),
            ActivationKind::Gelu => x.iter().map(|&v| gelu(v, self.gelu).0).collect(),
            ActivationKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
            ActivationKind::Identity => x.to_vec(),
            ActivationKind::Glu => {
                if x.len() % 2 != 0 {
                    return Err(Error::GluOddWidth(x.len()));
                }
                let (a, b) = x.split_at(x.len() / 2);
                a.iter().zip(b).map(|(a, b)| a * sigmoid(*b)).collect()
            }
        })
    }

    /// Vector-Jacobian product at input `x` for output cotangent `gy`.
    pub fn backward(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        match self.kind {
            ActivationKind::Relu => x
                .iter()
                .zip(gy)
                .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            ActivationKind::LeakyRelu => x
                .iter()
                .zip(gy)
                .map(|(&v, g)| if v > 0.0 { *g } else { self.leaky_slope * g })
                .collect(),
            ActivationKind::Gelu => x.iter().zip(gy).map(|(&v, g)| gelu(v, self.gelu).1 * g).collect(),
            ActivationKind::Tanh => x
                .iter()
                .zip(gy)
                .map(|(v, g)| {
                    let t = v.tanh();
                    (1.0 - t * t) * g
                })
                .collect(),
            ActivationKind::Identity => gy.to_vec(),
            ActivationKind::Glu => {
                let h = x.len() / 2;
                let (a, b) = x.split_at(h);
                let mut out = vec![0.0; x.len()];
                for i in 0..h {
                    let s = sigmoid(b[i]);
                    out[i] = s * gy[i];
                    out[h + i] = a[i] * s * (1.0 - s) * gy[i];
                }
                out
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(gelu(x), gelu'(x))`.
fn gelu(x: f64, variant: GeluVariant) -> (f64, f64) {
    match variant {
        GeluVariant::Erf => {
            let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
            let pdf = 0.5 * FRAC_2_SQRT_PI / SQRT_2 * (-0.5 * x * x).exp();
            (x * cdf, cdf + x * pdf)
        }
        GeluVariant::Tanh => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            let inner = k * (x + 0.044715 * x * x * x);
            let t = inner.tanh();
            let d_inner = k * (1.0 + 3.0 * 0.044715 * x * x);
            (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Param(ParamId),
    Input,
    EmbeddingRow { table: ParamId, row: usize, frozen: bool },
    Affine { w: Var, x: Var, b: Option<Var> },
    Activate { x: Var, act: Activation },
    Concat(Vec<Var>),
    Mask { x: Var, mask: Vec<f64> },
    Sum(Vec<Var>),
    Scale { x: Var, factor: f64 },
    SoftmaxCe { logits: Var, target: usize, probs: Vec<f64> },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    WeightedSum { weights: Var, items: Vec<Var> },
    QuantumStep { layout: &'a CircuitLayout, theta: Var, prev: Var },
    Readout { state: Var },
}

enum Value {
    Real(Vec<f64>),
    State(QuantumState),
    Param,
}

struct Node<'a> {
    op: Op<'a>,
    value: Value,
    shape: Vec<usize>,
}

enum Grad {
    Real(Vec<f64>),
    State(Vec<Complex64>),
}

/// Records one forward pass. Reusable only for a single backward pass.
pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<'a>, value: Value, shape: Vec<usize>) -> Var {
        self.nodes.push(Node { op, value, shape });
        Var(self.nodes.len() - 1)
    }

    fn push_real(&mut self, op: Op<'a>, values: Vec<f64>) -> Var {
        let shape = vec![values.len()];
        self.push(op, Value::Real(values), shape)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Real(x) => x,
            Value::Param => match self.nodes[v.0].op {
                Op::Param(id) => &self.params.get(id).values,
                _ => unreachable!("param value without param op"),
            },
            Value::State(_) => panic!("value() called on a quantum state node"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn state(&self, v: Var) -> &QuantumState {
        match &self.nodes[v.0].value {
            Value::State(s) => s,
            _ => panic!("state() called on a real-valued node"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape.clone();
        self.push(Op::Param(id), Value::Param, shape)
    }

    /// A constant vector (no gradient flows out of it).
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push_real(Op::Input, values)
    }

    /// A constant quantum state, e.g. `|0...0>` or a detached carried state.
    pub fn state_input(&mut self, state: QuantumState) -> Var {
        let shape = vec![state.dim()];
        self.push(Op::Input, Value::State(state), shape)
    }

    /// Row `row` of a 2-D table parameter. A `frozen` row receives no gradient.
    pub fn embedding(&mut self, table: ParamId, row: usize, frozen: bool) -> Result<Var> {
        let t = self.params.get(table);
        if t.shape.len() != 2 {
            return Err(Error::Dimension {
                what: "embedding table rank",
                expected: 2,
                actual: t.shape.len(),
            });
        }
        let (rows, width) = (t.shape[0], t.shape[1]);
        if row >= rows {
            return Err(Error::TokenOutOfRange { token: row, vocab: rows });
        }
        let values = t.values[row * width..(row + 1) * width].to_vec();
        Ok(self.push_real(Op::EmbeddingRow { table, row, frozen }, values))
    }

    /// `W x + b` with `W` of shape `[out, in]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::Dimension {
                what: "affine weight rank",
                expected: 2,
                actual: ws.len(),
            });
        }
        let (rows, cols) = (ws[0], ws[1]);
        let xv = self.value(x);
        check_dim("affine input width", cols, xv.len())?;
        let wv = self.value(w);
        let mut y = match b {
            Some(b) => {
                let bv = self.value(b);
                check_dim("affine bias width", rows, bv.len())?;
                bv.to_vec()
            }
            None => vec![0.0; rows],
        };
        for (yo, row) in y.iter_mut().zip(wv.chunks_exact(cols)) {
            *yo += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push_real(Op::Affine { w, x, b }, y))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act.kind == ActivationKind::Identity {
            return Ok(x);
        }
        let y = act.forward(self.value(x))?;
        Ok(self.push_real(Op::Activate { x, act }, y))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for &p in parts {
            y.extend_from_slice(self.value(p));
        }
        self.push_real(Op::Concat(parts.to_vec()), y)
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let y = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push_real(Op::Mask { x, mask }, y)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("sum of no terms"))?;
        let mut y = self.value(*first).to_vec();
        for &p in &parts[1..] {
            let pv = self.value(p);
            check_dim("summand width", y.len(), pv.len())?;
            y.iter_mut().zip(pv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push_real(Op::Sum(parts.to_vec()), y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * factor).collect();
        self.push_real(Op::Scale { x, factor }, y)
    }

    /// Max-subtracted `-log softmax(logits)[target]`, a 1-element vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() < 2 || target >= lv.len() {
            return Err(Error::TargetOutOfRange {
                target,
                classes: lv.len(),
            });
        }
        let probs = softmax(lv);
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        Ok(self.push_real(Op::SoftmaxCe { logits, target, probs }, vec![loss]))
    }

    /// Softmax over the entries with `mask[i] == true`; masked entries get
    /// weight exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        check_dim("mask width", xv.len(), mask.len())?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let max = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = xv
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        Ok(self.push_real(
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            w,
        ))
    }

    /// `sum_j weights[j] * items[j]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wv = self.value(weights).to_vec();
        check_dim("weighted sum count", items.len(), wv.len())?;
        let first = items.first().ok_or(Error::Empty("weighted sum of no items"))?;
        let mut y = vec![0.0; self.value(*first).len()];
        for (&item, w) in items.iter().zip(&wv) {
            let iv = self.value(item);
            check_dim("weighted sum item width", y.len(), iv.len())?;
            y.iter_mut().zip(iv).for_each(|(a, b)| *a += w * b);
        }
        Ok(self.push_real(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            y,
        ))
    }

    /// One recurrent quantum step: `h = U(theta) h_prev`, `z = Readout(h)`.
    /// Returns `(h, z)`.
    pub fn quantum_step(&mut self, layout: &'a CircuitLayout, theta: Var, prev: Var) -> Result<(Var, Var)> {
        let mut state = match &self.nodes[prev.0].value {
            Value::State(s) => s.clone(),
            _ => return Err(Error::InvalidSequence("quantum step input is not a state".into())),
        };
        layout.apply(self.value(theta), &mut state)?;
        let z = readout(&state);
        let shape = vec![state.dim()];
        let h = self.push(Op::QuantumStep { layout, theta, prev }, Value::State(state), shape);
        let z = self.push_real(Op::Readout { state: h }, z);
        Ok((h, z))
    }

    /// Backpropagates from the scalar `loss`, summing parameter gradients
    /// into `grads`.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients) -> Result<()> {
        self.backward_retain(loss, grads, &[]).map(|_| ())
    }

    /// Like [`Tape::backward`], also returning `dloss/dv` for each retained
    /// real-valued node (zeros when the node does not influence the loss).
    pub fn backward_retain(&mut self, loss: Var, grads: &mut Gradients, retain: &[Var]) -> Result<Vec<Vec<f64>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        check_dim("loss width", 1, self.value(loss).len())?;
        check_dim("gradient buffer count", self.params.len(), grads.len())?;
        self.consumed = true;

        let mut g: Vec<Option<Grad>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[loss.0] = Some(Grad::Real(vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match (&node.op, &gy) {
                (Op::Param(id), Grad::Real(gy)) => {
                    if self.params.get(*id).requires_grad {
                        add_into(grads.get_mut(*id), gy);
                    }
                }
                (Op::Input, _) => {}
                (Op::EmbeddingRow { table, row, frozen }, Grad::Real(gy)) => {
                    if !frozen && self.params.get(*table).requires_grad {
                        let w = gy.len();
                        add_into(&mut grads.get_mut(*table)[row * w..(row + 1) * w], gy);
                    }
                }
                (Op::Affine { w, x, b }, Grad::Real(gy)) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let cols = xv.len();
                    let mut gx = vec![0.0; cols];
                    for (row, go) in wv.chunks_exact(cols).zip(gy) {
                        gx.iter_mut().zip(row).for_each(|(a, r)| *a += r * go);
                    }
                    {
                        let gw = real_grad(&mut g, *w, wv.len());
                        for (grow, go) in gw.chunks_exact_mut(cols).zip(gy) {
                            grow.iter_mut().zip(xv).for_each(|(a, xi)| *a += go * xi);
                        }
                    }
                    if let Some(b) = b {
                        add_into(real_grad(&mut g, *b, gy.len()), gy);
                    }
                    add_into(real_grad(&mut g, *x, cols), &gx);
                }
                (Op::Activate { x, act }, Grad::Real(gy)) => {
                    let gx = act.backward(self.value(*x), gy);
                    add_into(real_grad(&mut g, *x, gx.len()), &gx);
                }
                (Op::Concat(parts), Grad::Real(gy)) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        add_into(real_grad(&mut g, p, n), &gy[off..off + n]);
                        off += n;
                    }
                }
                (Op::Mask { x, mask }, Grad::Real(gy)) => {
                    let gx: Vec<f64> = gy.iter().zip(mask).map(|(a, m)| a * m).collect();
                    add_into(real_grad(&mut g, *x, gx.len()), &gx);
                }
                (Op::Sum(parts), Grad::Real(gy)) => {
                    for &p in parts {
                        add_into(real_grad(&mut g, p, gy.len()), gy);
                    }
                }
                (Op::Scale { x, factor }, Grad::Real(gy)) => {
                    let gx: Vec<f64> = gy.iter().map(|v| v * factor).collect();
                    add_into(real_grad(&mut g, *x, gx.len()), &gx);
                }
                (Op::SoftmaxCe { logits, target, probs }, Grad::Real(gy)) => {
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * gy[0]).collect();
                    gx[*target] -= gy[0];
                    add_into(real_grad(&mut g, *logits, gx.len()), &gx);
                }
                (Op::MaskedSoftmax { x, mask }, Grad::Real(gy)) => {
                    let w = self.value(Var(idx));
                    let dot: f64 = w.iter().zip(gy).map(|(a, b)| a * b).sum();
                    let gx: Vec<f64> = w
                        .iter()
                        .zip(gy)
                        .zip(mask)
                        .map(|((wi, gi), &m)| if m { wi * (gi - dot) } else { 0.0 })
                        .collect();
                    add_into(real_grad(&mut g, *x, gx.len()), &gx);
                }
                (Op::WeightedSum { weights, items }, Grad::Real(gy)) => {
                    let wv = self.value(*weights).to_vec();
                    let mut gw = vec![0.0; wv.len()];
                    for (j, &item) in items.iter().enumerate() {
                        let iv = self.value(item);
                        gw[j] = iv.iter().zip(gy).map(|(a, b)| a * b).sum();
                        let gi = real_grad(&mut g, item, gy.len());
                        gi.iter_mut().zip(gy).for_each(|(a, b)| *a += wv[j] * b);
                    }
                    add_into(real_grad(&mut g, *weights, gw.len()), &gw);
                }
                (Op::Readout { state }, Grad::Real(gy)) => {
                    let s = self.state(*state);
                    let lambda = state_grad(&mut g, *state, s.dim());
                    accumulate_readout_cotangent(s, gy, lambda)?;
                }
                (Op::QuantumStep { layout, theta, prev }, Grad::State(lambda)) => {
                    let out = self.state(Var(idx));
                    let adj = layout.adjoint_sweep(self.value(*theta), out, lambda.clone())?;
                    add_into(real_grad(&mut g, *theta, adj.theta.len()), &adj.theta);
                    if !matches!(self.nodes[prev.0].op, Op::Input) {
                        let lp = state_grad(&mut g, *prev, adj.state_in.len());
                        lp.iter_mut().zip(&adj.state_in).for_each(|(a, b)| *a += b);
                    }
                }
                _ => unreachable!("gradient kind does not match node kind"),
            }
            g[idx] = Some(gy);
        }

        Ok(retain
            .iter()
            .map(|v| match &g[v.0] {
                Some(Grad::Real(x)) => x.clone(),
                _ => vec![0.0; self.value(*v).len()],
            })
            .collect())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn real_grad<'g>(g: &'g mut [Option<Grad>], v: Var, len: usize) -> &'g mut Vec<f64> {
    match g[v.0].get_or_insert_with(|| Grad::Real(vec![0.0; len])) {
        Grad::Real(x) => x,
        Grad::State(_) => unreachable!("real gradient requested for a state node"),
    }
}

fn state_grad<'g>(g: &'g mut [Option<Grad>], v: Var, len: usize) -> &'g mut Vec<Complex64> {
    match g[v.0].get_or_insert_with(|| Grad::State(vec![Complex64::new(0.0, 0.0); len])) {
        Grad::State(x) => x,
        Grad::Real(_) => unreachable!("state gradient requested for a real node"),
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    e
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ansatz::build_ansatz14;

    const H: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of every parameter entry against the tape.
    fn check_params(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64, build: &dyn Fn(&mut Tape) -> Var, tol: f64) {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads).unwrap();
        let mut worst: f64 = 0.0;
        for id in 0..store.len() {
            for k in 0..store.get(id).numel() {
                let mut p = store.clone();
                p.get_mut(id).values[k] += H;
                let mut m = store.clone();
                m.get_mut(id).values[k] -= H;
                let fd = (f(&p) - f(&m)) / (2.0 * H);
                worst = worst.max(rel_err(fd, grads.get(id)[k]));
            }
        }
        assert!(worst < tol, "worst relative error {worst:e}");
    }

    #[test]
    fn affine_scalar_case() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1, 1], vec![2.0]).unwrap();
        let b = store.add("b", &[1], vec![3.0]).unwrap();
        let x = store.add("x", &[1], vec![5.0]).unwrap();
        let mut tape = Tape::new(&store);
        let (wv, bv, xv) = (tape.param(w), tape.param(b), tape.param(x));
        let y = tape.affine(wv, xv, Some(bv)).unwrap();
        assert_eq!(tape.value(y), &[13.0]);
        let mut grads = store.zero_grads();
        tape.backward(y, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[5.0]);
        assert_eq!(grads.get(b), &[1.0]);
        assert_eq!(grads.get(x), &[2.0]);
    }

    #[test]
    fn affine_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = store.add("b", &[3], vec![0.0; 3]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.5, -2.0, 7.0]);
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.affine(wv, x, Some(bv)).unwrap();
        assert_eq!(tape.value(y), &[0.5, -2.0, 7.0]);
        let bad = tape.input(vec![1.0; 2]);
        assert!(tape.affine(wv, bad, Some(bv)).is_err());
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (out, inp) in [(1, 1), (3, 5), (7, 2)] {
            let mut store = ParamStore::new();
            store.add("w", &[out, inp], random_vec(out * inp, &mut rng)).unwrap();
            store.add("b", &[out], random_vec(out, &mut rng)).unwrap();
            store.add("x", &[inp], random_vec(inp, &mut rng)).unwrap();
            store.add("c", &[out], random_vec(out, &mut rng)).unwrap();
            let build = |tape: &mut Tape| {
                let (w, b, x, c) = (tape.param(0), tape.param(1), tape.param(2), tape.param(3));
                let y = tape.affine(w, x, Some(b)).unwrap();
                let y = tape.activation(y, Activation::new(ActivationKind::Tanh)).unwrap();
                // project onto a fixed direction to get a scalar
                let cw = tape.concat(&[c]);
                let ws = tape.masked_softmax(cw, &vec![true; out]).unwrap();
                let items: Vec<Var> = (0..out).map(|_| y).collect();
                let s = tape.weighted_sum(ws, &items).unwrap();
                let one = tape.input(vec![1.0; out]);
                let row = tape_row(tape, s);
                tape.affine(row, one, None).unwrap()
            };
            let f = |p: &ParamStore| {
                let mut t = Tape::new(p);
                let v = build(&mut t);
                t.value(v)[0]
            };
            check_params(&store, &f, &build, 1e-6);
        }
    }

    // Reinterpret a vector as a [1, n] row so `affine` can reduce it.
    fn tape_row(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let var = tape.concat(&[v]);
        tape.nodes[var.0].shape = vec![1, n];
        var
    }

    #[test]
    fn activation_goldens() {
        let relu = Activation::new(ActivationKind::Relu);
        assert_eq!(relu.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        let glu = Activation::new(ActivationKind::Glu);
        assert_eq!(glu.forward(&[2.0, 0.0]).unwrap(), vec![1.0]);
        assert!(matches!(glu.forward(&[1.0, 2.0, 3.0]), Err(Error::GluOddWidth(3))));
        let g = Activation::new(ActivationKind::Gelu);
        assert_eq!(g.forward(&[0.0]).unwrap(), vec![0.0]);
        assert!((g.backward(&[0.0], &[1.0])[0] - 0.5).abs() < 1e-15);
        let leaky = Activation::new(ActivationKind::LeakyRelu);
        assert_eq!(leaky.forward(&[-2.0, 3.0]).unwrap(), vec![-0.02, 3.0]);
        assert_eq!("leaky_relu".parse::<ActivationKind>().unwrap(), ActivationKind::LeakyRelu);
        assert!("swish".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let xs = [-2.3, -0.7, -0.01, 0.013, 0.4, 1.9];
        let kinds = [
            ActivationKind::Relu,
            ActivationKind::LeakyRelu,
            ActivationKind::Gelu,
            ActivationKind::Tanh,
            ActivationKind::Identity,
        ];
        for kind in kinds {
            for variant in [GeluVariant::Erf, GeluVariant::Tanh] {
                let act = Activation {
                    kind,
                    leaky_slope: 0.01,
                    gelu: variant,
                };
                for &x in &xs {
                    let fd = (act.forward(&[x + H]).unwrap()[0] - act.forward(&[x - H]).unwrap()[0]) / (2.0 * H);
                    let an = act.backward(&[x], &[1.0])[0];
                    assert!(rel_err(fd, an) < 1e-6, "{kind:?} {variant:?} at {x}: {fd} vs {an}");
                }
            }
        }
        let glu = Activation::new(ActivationKind::Glu);
        let x = [0.3, -1.2, 0.8, 2.0];
        let gy = [0.7, -0.4];
        let an = glu.backward(&x, &gy);
        for k in 0..4 {
            let mut p = x;
            p[k] += H;
            let mut m = x;
            m[k] -= H;
            let fp: f64 = glu.forward(&p).unwrap().iter().zip(&gy).map(|(a, b)| a * b).sum();
            let fm: f64 = glu.forward(&m).unwrap().iter().zip(&gy).map(|(a, b)| a * b).sum();
            assert!(rel_err((fp - fm) / (2.0 * H), an[k]) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let l = tape.input(vec![0.0; 8]);
        let ce = tape.softmax_cross_entropy(l, 3).unwrap();
        assert!((tape.value(ce)[0] - 8f64.ln()).abs() < 1e-12);
        // Uniform over 7 candidate digits (one class ruled out): ln 7.
        let mut logits = vec![0.0; 8];
        logits[0] = f64::NEG_INFINITY;
        let l = tape.input(logits);
        let ce = tape.softmax_cross_entropy(l, 5).unwrap();
        assert!((tape.value(ce)[0] - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.9459).abs() < 1e-4);
        let l = tape.input(vec![0.0; 4]);
        assert!(tape.softmax_cross_entropy(l, 4).is_err());
        // Large logits stay finite.
        let l = tape.input(vec![1000.0, -1000.0, 999.0]);
        let ce = tape.softmax_cross_entropy(l, 2).unwrap();
        assert!((tape.value(ce)[0] - (1.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("logits", &[6], random_vec(6, &mut rng)).unwrap();
        let build = |tape: &mut Tape| {
            let l = tape.param(0);
            tape.softmax_cross_entropy(l, 2).unwrap()
        };
        let f = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let v = build(&mut t);
            t.value(v)[0]
        };
        check_params(&store, &f, &build, 1e-6);
    }

    #[test]
    fn masked_softmax_properties() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![3.0, -1.0, 0.5]);
        let w = tape.masked_softmax(x, &[true, false, true]).unwrap();
        let wv = tape.value(w);
        assert_eq!(wv[1], 0.0);
        assert!((wv.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(tape.masked_softmax(x, &[false; 3]), Err(Error::AllMasked)));
        let single = tape.input(vec![42.0]);
        let w = tape.masked_softmax(single, &[true]).unwrap();
        assert_eq!(tape.value(w), &[1.0]);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        store.add("emb", &[5, 3], random_vec(15, &mut rng)).unwrap();
        store.add("w", &[4, 6], random_vec(24, &mut rng)).unwrap();
        store.add("b", &[4], random_vec(4, &mut rng)).unwrap();
        store.add("wg", &[4, 4], random_vec(16, &mut rng)).unwrap();
        store.add("s", &[3], random_vec(3, &mut rng)).unwrap();
        let build = |tape: &mut Tape| {
            let e1 = tape.embedding(0, 1, false).unwrap();
            let e3 = tape.embedding(0, 3, false).unwrap();
            let u = tape.concat(&[e1, e3]);
            let (w, b, wg) = (tape.param(1), tape.param(2), tape.param(3));
            let mut outs = Vec::new();
            for kind in [ActivationKind::Relu, ActivationKind::LeakyRelu, ActivationKind::Gelu, ActivationKind::Tanh] {
                let y = tape.affine(w, u, Some(b)).unwrap();
                outs.push(tape.activation(y, Activation::new(kind)).unwrap());
            }
            let pre = tape.affine(wg, outs[0], None).unwrap();
            let glu = tape.activation(pre, Activation::new(ActivationKind::Glu)).unwrap();
            let s = tape.param(4);
            let sc = tape.scale(s, 0.7);
            let att = tape.masked_softmax(sc, &[true, true, false]).unwrap();
            let mix = tape.weighted_sum(att, &[outs[1], outs[2], outs[3]]).unwrap();
            let tot = tape.sum(&[mix, outs[3]]).unwrap();
            let logits = tape.concat(&[tot, glu]);
            tape.softmax_cross_entropy(logits, 4).unwrap()
        };
        let f = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let v = build(&mut t);
            t.value(v)[0]
        };
        check_params(&store, &f, &build, 1e-5);
    }

    #[test]
    fn frozen_embedding_row_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.add("emb", &[3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.embedding(0, 0, true).unwrap();
        let b = tape.embedding(0, 2, false).unwrap();
        let c = tape.concat(&[a, b]);
        let l = tape.softmax_cross_entropy(c, 0).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(l, &mut grads).unwrap();
        assert_eq!(&grads.get(0)[0..2], &[0.0, 0.0]);
        assert_eq!(&grads.get(0)[2..4], &[0.0, 0.0]);
        assert!(grads.get(0)[4..6].iter().any(|g| *g != 0.0));
        assert!(tape.embedding(0, 3, false).is_err());
    }

    #[test]
    fn dropout_masks_and_rescales() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0; 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(x, 0.25, &mut rng);
        let v = tape.value(y);
        assert!(v.iter().all(|&a| a == 0.0 || (a - 4.0 / 3.0).abs() < 1e-15));
        let dropped = v.iter().filter(|&&a| a == 0.0).count();
        assert!((150..350).contains(&dropped));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::new();
        store.add("x", &[2], vec![0.1, 0.2]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let l = tape.softmax_cross_entropy(x, 1).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(l, &mut grads).unwrap();
        let snapshot = grads.clone();
        assert!(matches!(tape.backward(l, &mut grads), Err(Error::TapeConsumed)));
        assert_eq!(grads, snapshot);
    }

    #[test]
    fn quantum_step_at_zero_theta() {
        let layout = build_ansatz14(3).unwrap();
        let mut store = ParamStore::new();
        store.add("theta", &[12], vec![0.0; 12]).unwrap();
        let mut tape = Tape::new(&store);
        let h0 = tape.state_input(QuantumState::zero(3).unwrap());
        let th = tape.param(0);
        let (_, z) = tape.quantum_step(&layout, th, h0).unwrap();
        assert_eq!(tape.value(z), [0.0, 0.0, 1.0].repeat(3).as_slice());
        // Sum of <Z_k>: stationary at theta = 0 (cos-shaped in each RY angle,
        // CRX inactive with controls in |0>).
        let ones = tape.input(vec![0.0, 0.0, 1.0].repeat(3));
        let zr = tape_row(&mut tape, z);
        let l = tape.affine(zr, ones, None).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(l, &mut grads).unwrap();
        let f = |theta: &[f64]| {
            let mut s = QuantumState::zero(3).unwrap();
            layout.apply(theta, &mut s).unwrap();
            let r = readout(&s);
            r[2] + r[5] + r[8]
        };
        for i in 0..12 {
            let mut p = vec![0.0; 12];
            p[i] = H;
            let mut m = vec![0.0; 12];
            m[i] = -H;
            let fd = (f(&p) - f(&m)) / (2.0 * H);
            assert!(fd.abs() < 1e-9);
            assert!(grads.get(0)[i].abs() < 1e-12);
        }
    }

    #[test]
    fn chained_quantum_steps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let layout: &'static CircuitLayout = Box::leak(Box::new(build_ansatz14(4).unwrap()));
        let mut store = ParamStore::new();
        store.add("t1", &[16], random_vec(16, &mut rng)).unwrap();
        store.add("t2", &[16], random_vec(16, &mut rng)).unwrap();
        store.add("w", &[3, 12], random_vec(36, &mut rng)).unwrap();
        store.add("fb", &[16, 12], random_vec(192, &mut rng)).unwrap();
        let layout_ref = layout;
        let build = move |tape: &mut Tape<'_>| {
            let h0 = tape.state_input(QuantumState::zero(4).unwrap());
            let t1 = tape.param(0);
            let (h1, z1) = tape.quantum_step(layout_ref, t1, h0).unwrap();
            // theta_2 depends on z_1 (feedback path) plus a free offset
            let fb = tape.param(3);
            let fz = tape.affine(fb, z1, None).unwrap();
            let t2 = tape.param(1);
            let th2 = tape.sum(&[fz, t2]).unwrap();
            let (_, z2) = tape.quantum_step(layout_ref, th2, h1).unwrap();
            let w = tape.param(2);
            let logits = tape.affine(w, z2, None).unwrap();
            tape.softmax_cross_entropy(logits, 1).unwrap()
        };
        let mut tape = Tape::new(&store);
        let loss = build(&mut tape);
        let mut grads = store.zero_grads();
        tape.backward(loss, &mut grads).unwrap();
        assert!(grads.get(0).iter().any(|g| g.abs() > 1e-6), "loss at t=2 must reach theta_1");
        let f = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let v = build(&mut t);
            t.value(v)[0]
        };
        check_params(&store, &f, &build, 1e-5);
    }

    #[test]
    fn retained_gradients() {
        let mut store = ParamStore::new();
        store.add("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, -1.0]);
        let w = tape.param(0);
        let y = tape.affine(w, x, None).unwrap();
        let unused = tape.input(vec![5.0]);
        let l = tape.softmax_cross_entropy(y, 0).unwrap();
        let mut grads = store.zero_grads();
        let r = tape.backward_retain(l, &mut grads, &[y, unused]).unwrap();
        let p = softmax(&[-1.0, -1.0]);
        assert_eq!(r[0], vec![p[0] - 1.0, p[1]]);
        assert_eq!(r[1], vec![0.0]);
    }
}
