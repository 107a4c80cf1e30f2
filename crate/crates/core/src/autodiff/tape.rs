//! Eager reverse-mode tape.
//!
//! Every primitive computes its value immediately and, when any input
//! requires a gradient, records which tensors its backward rule needs. The
//! set of saved references depends on which inputs require gradients: a
//! matmul against a frozen weight keeps the weight (a parameter, not an
//! activation) and drops its activation input. The activation ledger is
//! computed from exactly these references.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels as k;
use super::ledger::{ActivationLedger, LedgerRecord};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamValue};
use crate::tensor::{numel, Float, NdArray};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf(LeafKind),
    MatMul,
    BatchMatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize },
    LayerNorm { eps: f64 },
    Softmax,
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Reshape,
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Sum,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    MaxAxis { axis: usize, argmax: Vec<usize> },
    UpsampleNearest { factor: usize },
    UpsampleBilinear,
    BceWithLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LeafKind {
    Param(ParamId),
    /// Data-dependent input (image, prompt encodings, dropout masks).
    Input,
    /// Data-independent constant (dequantized weights, fixed encodings).
    Constant,
    /// Free-standing differentiable leaf.
    Free,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul => "matmul",
            Op::BatchMatMul => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::UpsampleBilinear => "upsample_bilinear",
            Op::BceWithLogits => "bce_with_logits",
        }
    }
}

/// A tensor a backward rule reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Saved {
    Input(usize),
    Output,
    Aux(usize),
    /// Integer indices held in the op itself (argmax).
    Indices,
}

pub(crate) struct Node<T> {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) value: Arc<NdArray<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) activation: bool,
    pub(crate) saved: Vec<Saved>,
    pub(crate) aux: Vec<NdArray<T>>,
    pub(crate) region: Arc<str>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, NdArray<T>>,
    leaves: HashMap<usize, NdArray<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&NdArray<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&NdArray<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &NdArray<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds another set of gradients into this one.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        for (id, g) in other.leaves {
            self.leaves.entry(id).or_insert(g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn empty() -> Self {
        Self {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        }
    }
}

/// Position on a tape that can be rewound to.
#[derive(Debug, Clone, Copy)]
pub struct TapeMark(usize);

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    region: Arc<str>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
    consumed: bool,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::shape(op, format!("{shapes:?}"))
}

impl<T: Float> Tape<T> {
    /// A tape that records gradients (evaluation mode: dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            region: Arc::from("untagged"),
            grad_enabled: true,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            consumed: false,
        }
    }

    /// A gradient-recording tape in training mode; `seed` drives dropout.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// A tape that never records gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_region(&mut self, region: &str) {
        if &*self.region != region {
            self.region = Arc::from(region);
        }
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Drops every node recorded after `mark`.
    pub fn rewind(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.0);
        self.params.retain(|_, &mut i| i < mark.0);
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: NdArray<T>, kind: LeafKind, requires_grad: bool) -> Var {
        let activation = matches!(kind, LeafKind::Input | LeafKind::Free);
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            value: Arc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            activation,
            saved: Vec::new(),
            aux: Vec::new(),
            region: self.region.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Data-dependent input without gradient.
    pub fn input(&mut self, value: NdArray<T>) -> Var {
        self.push_leaf(value, LeafKind::Input, false)
    }

    /// Data-independent constant without gradient.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push_leaf(value, LeafKind::Constant, false)
    }

    /// Free-standing leaf, differentiable when `requires_grad`.
    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, LeafKind::Free, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same var.
    /// Quantized parameters are dequantized into a constant.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&i) = self.params.get(&id) {
            return Ok(Var(i));
        }
        let meta = store.meta(id);
        let v = match store.value(id) {
            ParamValue::Dense(a) => {
                self.nodes.push(Node {
                    op: Op::Leaf(LeafKind::Param(id)),
                    inputs: Vec::new(),
                    value: a.clone(),
                    requires_grad: meta.trainable && self.grad_enabled,
                    activation: false,
                    saved: Vec::new(),
                    aux: Vec::new(),
                    region: Arc::from(meta.region.as_str()),
                });
                Var(self.nodes.len() - 1)
            }
            ParamValue::Quantized(q) => self.constant(q.dequantize()),
            ParamValue::Virtual | ParamValue::VirtualQuantized(_) => {
                return Err(Error::Config(format!(
                    "{} has no values (count-only model)",
                    meta.name
                )))
            }
        };
        self.params.insert(id, v.0);
        Ok(v)
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        value: NdArray<T>,
        aux: Vec<NdArray<T>>,
        saved_for: impl Fn(&[bool]) -> Vec<Saved>,
    ) -> Var {
        let rg: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
        let requires_grad = rg.iter().any(|&b| b);
        let activation = inputs.iter().any(|&i| self.nodes[i].activation);
        let (saved, aux) = if requires_grad {
            let mut s = saved_for(&rg);
            s.dedup();
            (s, aux)
        } else {
            (Vec::new(), Vec::new())
        };
        self.nodes.push(Node {
            op,
            inputs,
            value: Arc::new(value),
            requires_grad,
            activation,
            saved,
            aux,
            region: self.region.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    // ----- linear algebra ---------------------------------------------------

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let out = k::matmul(self.value(a).data(), self.value(b).data(), m, kk, n);
        let value = NdArray::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], value, vec![], |rg| {
            let mut s = vec![];
            if rg[0] {
                s.push(Saved::Input(1));
            }
            if rg[1] {
                s.push(Saved::Input(0));
            }
            s
        }))
    }

    /// `[b,m,k] x [b,k,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let (bs, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(k::matmul(
                &av[i * m * kk..(i + 1) * m * kk],
                &bv[i * kk * n..(i + 1) * kk * n],
                m,
                kk,
                n,
            ));
        }
        let value = NdArray::new(vec![bs, m, n], out)?;
        Ok(self.push(Op::BatchMatMul, vec![a.0, b.0], value, vec![], |rg| {
            let mut s = vec![];
            if rg[0] {
                s.push(Saved::Input(1));
            }
            if rg[1] {
                s.push(Saved::Input(0));
            }
            s
        }))
    }

    /// Cross-correlation of `[c,h,w]` with `[o,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3
            || sw.len() != 4
            || sx[0] != sw[1]
            || stride == 0
            || sx[1] + 2 * pad < sw[2]
            || sx[2] + 2 * pad < sw[3]
        {
            return Err(shape_err("conv2d", &[sx, sw]));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (cols, ho, wo) = k::im2col(self.value(x).data(), c, h, wd, kh, kw, stride, pad);
        let out = k::matmul(self.value(w).data(), &cols, o, c * kh * kw, ho * wo);
        let value = NdArray::new(vec![o, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x.0, w.0], value, vec![], |rg| {
            let mut s = vec![];
            if rg[0] {
                s.push(Saved::Input(1));
            }
            if rg[1] {
                s.push(Saved::Input(0));
            }
            s
        }))
    }

    /// Transposed convolution with kernel size equal to `stride`:
    /// `[c,h,w]` with `[c,o,s,s]` gives `[o,h*s,w*s]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[0] || sw[2] != sw[3] || sw[2] == 0 {
            return Err(shape_err("conv_transpose2d", &[sx, sw]));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, s) = (sw[1], sw[2]);
        let cols = k::matmul_tn(self.value(w).data(), self.value(x).data(), c, o * s * s, h * wd);
        let (oh, ow) = (h * s, wd * s);
        let mut out = vec![T::zero(); o * oh * ow];
        for oo in 0..o {
            for a in 0..s {
                for b in 0..s {
                    let row = &cols[((oo * s + a) * s + b) * h * wd..][..h * wd];
                    for i in 0..h {
                        for j in 0..wd {
                            out[(oo * oh + i * s + a) * ow + j * s + b] = row[i * wd + j];
                        }
                    }
                }
            }
        }
        let value = NdArray::new(vec![o, oh, ow], out)?;
        Ok(self.push(Op::ConvTranspose2d { stride: s }, vec![x.0, w.0], value, vec![], |rg| {
            let mut s = vec![];
            if rg[0] {
                s.push(Saved::Input(1));
            }
            if rg[1] {
                s.push(Saved::Input(0));
            }
            s
        }))
    }

    // ----- normalization and nonlinearities -----------------------------------

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &[sx, self.shape(gamma), self.shape(beta)]));
        }
        let shape = sx.to_vec();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = NdArray::new(shape.clone(), out)?;
        let aux = vec![NdArray::new(shape, xhat)?, NdArray::new(vec![rows], rstd)?];
        Ok(self.push(Op::LayerNorm { eps }, vec![x.0, gamma.0, beta.0], value, aux, |rg| {
            let mut s = vec![];
            if rg[0] {
                s.extend([Saved::Aux(0), Saved::Aux(1), Saved::Input(1)]);
            }
            if rg[1] {
                s.push(Saved::Aux(0));
            }
            s
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = NdArray::new(shape, out)?;
        Ok(self.push(Op::Softmax, vec![x.0], value, vec![], |_| vec![Saved::Output]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T, saved: Saved) -> Result<Var> {
        let value = self.value(x).map(f);
        Ok(self.push(op, vec![x.0], value, vec![], move |_| vec![saved]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu, k::gelu, Saved::Input(0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| v.max(T::zero()), Saved::Output)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, k::sigmoid, Saved::Output)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp, |v| v.exp(), Saved::Output)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log, |v| v.ln(), Saved::Input(0))
    }

    // ----- elementwise --------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = k::broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, &[sa, sb]))?;
        let out = k::broadcast_binary(
            self.value(a).data(),
            sa,
            self.value(b).data(),
            sb,
            &out_shape,
            f,
        );
        let value = NdArray::new(out_shape, out)?;
        let saved_for = match op {
            Op::Mul => |rg: &[bool]| {
                let mut s = vec![];
                if rg[0] {
                    s.push(Saved::Input(1));
                }
                if rg[1] {
                    s.push(Saved::Input(0));
                }
                s
            },
            Op::Div => |rg: &[bool]| {
                let mut s = vec![Saved::Input(1)];
                if rg[1] {
                    s.push(Saved::Output);
                }
                s
            },
            _ => |_: &[bool]| vec![],
        };
        Ok(self.push(op, vec![a.0, b.0], value, vec![], saved_for))
    }

    /// Broadcasting add.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let st = T::of(s);
        let value = self.value(x).map(|v| v * st);
        Ok(self.push(Op::Scale(s), vec![x.0], value, vec![], |_| vec![]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let st = T::of(s);
        let value = self.value(x).map(|v| v + st);
        Ok(self.push(Op::AddScalar(s), vec![x.0], value, vec![], |_| vec![]))
    }

    /// Inverted dropout; identity outside training mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = NdArray::from_fn(&shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let m = self.input(mask);
        self.mul(x, m)
    }

    // ----- shape manipulation ---------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", &[self.shape(x), shape]));
        }
        let value = NdArray::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![x.0], value, vec![], |_| vec![]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut check = axes.to_vec();
        check.sort_unstable();
        if axes.len() != sx.len() || check.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sx:?}")));
        }
        let (shape, data) = k::permute(self.value(x).data(), sx, axes);
        let value = NdArray::new(shape, data)?;
        Ok(self.push(Op::Permute(axes.to_vec()), vec![x.0], value, vec![], |_| vec![]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err("transpose", &[self.shape(x)]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start >= end || end > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {sx:?}"),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * sx[axis] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = sx;
        shape[axis] = end - start;
        let value = NdArray::new(shape, out)?;
        Ok(self.push(Op::Slice { axis, start, end }, vec![x.0], value, vec![], |_| vec![]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &[&first, s]));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = NdArray::new(shape, out)?;
        let inputs = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::Concat { axis }, inputs, value, vec![], |_| vec![]))
    }

    // ----- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = NdArray::scalar(self.value(x).sum());
        Ok(self.push(Op::Sum, vec![x.0], value, vec![], |_| vec![]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn axis_split(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::shape(op, format!("axis {axis} of {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let mut shape: Vec<usize> = sx.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((outer, sx[axis], inner, shape))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis, "sum_axis")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let value = NdArray::new(shape, out)?;
        Ok(self.push(Op::SumAxis { axis }, vec![x.0], value, vec![], |_| vec![]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis, "mean_axis")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = NdArray::new(shape, out)?;
        Ok(self.push(Op::MeanAxis { axis }, vec![x.0], value, vec![], |_| vec![]))
    }

    /// Max along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split(x, axis, "max_axis")?;
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let src = (o * n + i) * inner + j;
                    let dst = o * inner + j;
                    if xv[src] > out[dst] || i == 0 {
                        out[dst] = xv[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let value = NdArray::new(shape, out)?;
        Ok(self.push(Op::MaxAxis { axis, argmax }, vec![x.0], value, vec![], |_| vec![Saved::Indices]))
    }

    // ----- resampling -----------------------------------------------------------

    /// Nearest-neighbour upsampling of `[c,h,w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || factor == 0 {
            return Err(shape_err("upsample_nearest", &[&sx]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(xv[(ci * h + i / factor) * w + j / factor]);
                }
            }
        }
        let value = NdArray::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::UpsampleNearest { factor }, vec![x.0], value, vec![], |_| vec![]))
    }

    /// Bilinear resize of `[c,h,w]` to `[c,oh,ow]` (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || oh == 0 || ow == 0 {
            return Err(shape_err("upsample_bilinear", &[&sx]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for i in 0..oh {
            let (i0, i1, fy) = k::bilinear_taps(i, h, oh);
            let fy = T::of(fy);
            for j in 0..ow {
                let (j0, j1, fx) = k::bilinear_taps(j, w, ow);
                let fx = T::of(fx);
                for ci in 0..c {
                    let p = &xv[ci * h * w..];
                    let top = p[i0 * w + j0] * (T::one() - fx) + p[i0 * w + j1] * fx;
                    let bot = p[i1 * w + j0] * (T::one() - fx) + p[i1 * w + j1] * fx;
                    out[(ci * oh + i) * ow + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = NdArray::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::UpsampleBilinear, vec![x.0], value, vec![], |_| vec![]))
    }

    // ----- losses ---------------------------------------------------------------

    /// Mean binary cross-entropy between logits and targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (sl, st) = (self.shape(logits), self.shape(target));
        if sl != st {
            return Err(shape_err("bce_with_logits", &[sl, st]));
        }
        let (lv, tv) = (self.value(logits).data(), self.value(target).data());
        let total: T = lv
            .iter()
            .zip(tv)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let value = NdArray::scalar(total / T::of(lv.len() as f64));
        Ok(self.push(Op::BceWithLogits, vec![logits.0, target.0], value, vec![], |rg| {
            let mut s = vec![Saved::Input(0)];
            if rg[0] {
                s.push(Saved::Input(1));
            }
            s
        }))
    }

    // ----- backward -------------------------------------------------------------

    fn saved<'a>(&'a self, node: &'a Node<T>, r: Saved) -> &'a NdArray<T> {
        debug_assert!(node.saved.contains(&r), "{} read unsaved {r:?}", node.op.name());
        match r {
            Saved::Input(i) => &self.nodes[node.inputs[i]].value,
            Saved::Output => &node.value,
            Saved::Aux(i) => &node.aux[i],
            Saved::Indices => unreachable!("indices live in the op"),
        }
    }

    /// Propagates gradients from a scalar `loss` to every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; run a new forward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads = Gradients::empty();
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(kind) = node.op {
                let arr = NdArray::new(node.value.shape().to_vec(), g)?;
                match kind {
                    LeafKind::Param(id) => {
                        grads.params.insert(id, arr);
                    }
                    _ => {
                        grads.leaves.insert(idx, arr);
                    }
                }
                continue;
            }
            let contributions = self.input_grads(node, &g)?;
            for (slot, contrib) in contributions.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let target = node.inputs[slot];
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut adj[target] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(grads)
    }

    fn input_grads(&self, node: &Node<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let rg: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
        let in_shape = |i: usize| self.nodes[node.inputs[i]].value.shape();
        let out_shape = node.value.shape();
        let mut res: Vec<Option<Vec<T>>> = vec![None; node.inputs.len()];
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul => {
                let (m, kk, n) = (in_shape(0)[0], in_shape(0)[1], in_shape(1)[1]);
                if rg[0] {
                    let b = self.saved(node, Saved::Input(1));
                    res[0] = Some(k::matmul_nt(g, b.data(), m, n, kk));
                }
                if rg[1] {
                    let a = self.saved(node, Saved::Input(0));
                    res[1] = Some(k::matmul_tn(a.data(), g, m, kk, n));
                }
            }
            Op::BatchMatMul => {
                let (bs, m, kk, n) = (in_shape(0)[0], in_shape(0)[1], in_shape(0)[2], in_shape(1)[2]);
                if rg[0] {
                    let b = self.saved(node, Saved::Input(1)).data();
                    let mut da = Vec::with_capacity(bs * m * kk);
                    for i in 0..bs {
                        da.extend(k::matmul_nt(&g[i * m * n..][..m * n], &b[i * kk * n..][..kk * n], m, n, kk));
                    }
                    res[0] = Some(da);
                }
                if rg[1] {
                    let a = self.saved(node, Saved::Input(0)).data();
                    let mut db = Vec::with_capacity(bs * kk * n);
                    for i in 0..bs {
                        db.extend(k::matmul_tn(&a[i * m * kk..][..m * kk], &g[i * m * n..][..m * n], m, kk, n));
                    }
                    res[1] = Some(db);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (sx, sw) = (in_shape(0), in_shape(1));
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let ckk = c * kh * kw;
                if rg[0] {
                    let wv = self.saved(node, Saved::Input(1)).data();
                    let dcols = k::matmul_tn(wv, g, o, ckk, ho * wo);
                    res[0] = Some(k::col2im(&dcols, c, h, w, kh, kw, *stride, *pad, ho, wo));
                }
                if rg[1] {
                    let xv = self.saved(node, Saved::Input(0)).data();
                    let (cols, _, _) = k::im2col(xv, c, h, w, kh, kw, *stride, *pad);
                    res[1] = Some(k::matmul_nt(g, &cols, o, ho * wo, ckk));
                }
            }
            Op::ConvTranspose2d { stride } => {
                let s = *stride;
                let (sx, sw) = (in_shape(0), in_shape(1));
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let o = sw[1];
                let (oh, ow) = (h * s, w * s);
                let hw = h * w;
                let mut dcols = vec![T::zero(); o * s * s * hw];
                for oo in 0..o {
                    for a in 0..s {
                        for b in 0..s {
                            let row = &mut dcols[((oo * s + a) * s + b) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..w {
                                    row[i * w + j] = g[(oo * oh + i * s + a) * ow + j * s + b];
                                }
                            }
                        }
                    }
                }
                if rg[0] {
                    let wv = self.saved(node, Saved::Input(1)).data();
                    res[0] = Some(k::matmul(wv, &dcols, c, o * s * s, hw));
                }
                if rg[1] {
                    let xv = self.saved(node, Saved::Input(0)).data();
                    res[1] = Some(k::matmul_nt(xv, &dcols, c, hw, o * s * s));
                }
            }
            Op::LayerNorm { .. } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                if rg[2] {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    res[2] = Some(db);
                }
                if rg[1] {
                    let xhat = self.saved(node, Saved::Aux(0)).data();
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    res[1] = Some(dg);
                }
                if rg[0] {
                    let xhat = self.saved(node, Saved::Aux(0)).data();
                    let rstd = self.saved(node, Saved::Aux(1)).data();
                    let gamma = self.saved(node, Saved::Input(1)).data();
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma[j];
                            dx[r * d + j] = rstd[r] / dn * (dn * dxh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    res[0] = Some(dx);
                }
            }
            Op::Softmax => {
                let y = self.saved(node, Saved::Output).data();
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res[0] = Some(dx);
            }
            Op::Gelu => {
                let x = self.saved(node, Saved::Input(0)).data();
                res[0] = Some(x.iter().zip(g).map(|(&v, &gv)| gv * k::gelu_grad(v)).collect());
            }
            Op::Relu => {
                let y = self.saved(node, Saved::Output).data();
                res[0] = Some(
                    y.iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid => {
                let y = self.saved(node, Saved::Output).data();
                res[0] = Some(y.iter().zip(g).map(|(&v, &gv)| gv * v * (T::one() - v)).collect());
            }
            Op::Exp => {
                let y = self.saved(node, Saved::Output).data();
                res[0] = Some(y.iter().zip(g).map(|(&v, &gv)| gv * v).collect());
            }
            Op::Log => {
                let x = self.saved(node, Saved::Input(0)).data();
                res[0] = Some(x.iter().zip(g).map(|(&v, &gv)| gv / v).collect());
            }
            Op::Add | Op::Sub => {
                if rg[0] {
                    res[0] = Some(k::reduce_to_shape(g, out_shape, in_shape(0)));
                }
                if rg[1] {
                    let mut d = k::reduce_to_shape(g, out_shape, in_shape(1));
                    if node.op == Op::Sub {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    res[1] = Some(d);
                }
            }
            Op::Mul => {
                for (i, other) in [(0usize, 1usize), (1, 0)] {
                    if rg[i] {
                        let o = self.saved(node, Saved::Input(other));
                        let prod = k::broadcast_binary(g, out_shape, o.data(), o.shape(), out_shape, |a, b| a * b);
                        res[i] = Some(k::reduce_to_shape(&prod, out_shape, in_shape(i)));
                    }
                }
            }
            Op::Div => {
                let b = self.saved(node, Saved::Input(1));
                let gb = k::broadcast_binary(g, out_shape, b.data(), b.shape(), out_shape, |a, bb| a / bb);
                if rg[0] {
                    res[0] = Some(k::reduce_to_shape(&gb, out_shape, in_shape(0)));
                }
                if rg[1] {
                    let y = self.saved(node, Saved::Output).data();
                    let prod: Vec<T> = gb.iter().zip(y).map(|(&a, &yy)| -a * yy).collect();
                    res[1] = Some(k::reduce_to_shape(&prod, out_shape, in_shape(1)));
                }
            }
            Op::Scale(s) => {
                let st = T::of(*s);
                res[0] = Some(g.iter().map(|&v| v * st).collect());
            }
            Op::AddScalar(_) | Op::Reshape => res[0] = Some(g.to_vec()),
            Op::Permute(axes) => {
                let (_, back) = k::permute(g, out_shape, &k::inverse_axes(axes));
                res[0] = Some(back);
            }
            Op::Slice { axis, start, end } => {
                let sx = in_shape(0);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); numel(sx)];
                let w = (end - start) * inner;
                for o in 0..outer {
                    let base = o * sx[*axis] * inner + start * inner;
                    dx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                res[0] = Some(dx);
            }
            Op::Concat { axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for i in 0..node.inputs.len() {
                    let n = in_shape(i)[*axis] * inner;
                    if rg[i] {
                        let mut d = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + off..o * total + off + n]);
                        }
                        res[i] = Some(d);
                    }
                    off += n;
                }
            }
            Op::Sum => res[0] = Some(vec![g[0]; numel(in_shape(0))]),
            Op::SumAxis { axis } | Op::MeanAxis { axis } => {
                let sx = in_shape(0);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let n = sx[*axis];
                let s = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let mut dx = Vec::with_capacity(numel(sx));
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * s));
                    }
                }
                res[0] = Some(dx);
            }
            Op::MaxAxis { argmax, .. } => {
                debug_assert!(node.saved.contains(&Saved::Indices));
                let mut dx = vec![T::zero(); numel(in_shape(0))];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                res[0] = Some(dx);
            }
            Op::UpsampleNearest { factor } => {
                let sx = in_shape(0);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[(ci * h + i / factor) * w + j / factor] += g[(ci * oh + i) * ow + j];
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::UpsampleBilinear => {
                let sx = in_shape(0);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for i in 0..oh {
                    let (i0, i1, fy) = k::bilinear_taps(i, h, oh);
                    let fy = T::of(fy);
                    for j in 0..ow {
                        let (j0, j1, fx) = k::bilinear_taps(j, w, ow);
                        let fx = T::of(fx);
                        for ci in 0..c {
                            let gv = g[(ci * oh + i) * ow + j];
                            let p = &mut dx[ci * h * w..];
                            p[i0 * w + j0] += gv * (T::one() - fy) * (T::one() - fx);
                            p[i0 * w + j1] += gv * (T::one() - fy) * fx;
                            p[i1 * w + j0] += gv * fy * (T::one() - fx);
                            p[i1 * w + j1] += gv * fy * fx;
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::BceWithLogits => {
                let x = self.saved(node, Saved::Input(0)).data();
                let n = T::of(x.len() as f64);
                if rg[0] {
                    let t = self.saved(node, Saved::Input(1)).data();
                    res[0] = Some(x.iter().zip(t).map(|(&xv, &tv)| g[0] * (k::sigmoid(xv) - tv) / n).collect());
                }
                if rg[1] {
                    res[1] = Some(x.iter().map(|&xv| -g[0] * xv / n).collect());
                }
            }
        }
        Ok(res)
    }

    // ----- accounting -----------------------------------------------------------

    /// Bytes of activations retained for the backward pass, per record.
    ///
    /// A saved tensor counts only when it is data-dependent; parameters and
    /// constants are accounted as parameter memory. Each tensor is charged
    /// once, to the first record whose backward rule keeps it.
    pub fn ledger(&self) -> ActivationLedger {
        let elem = std::mem::size_of::<T>() as u64;
        let mut charged: std::collections::HashSet<(usize, Option<usize>)> = Default::default();
        let mut records = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let mut bytes = 0u64;
            for &r in &node.saved {
                let (key, len, activation) = match r {
                    Saved::Input(i) => {
                        let src = &self.nodes[node.inputs[i]];
                        ((node.inputs[i], None), src.value.len(), src.activation)
                    }
                    Saved::Output => ((idx, None), node.value.len(), node.activation),
                    Saved::Aux(a) => ((idx, Some(a)), node.aux[a].len(), node.activation),
                    Saved::Indices => {
                        let n = match &node.op {
                            Op::MaxAxis { argmax, .. } => argmax.len(),
                            _ => 0,
                        };
                        // indices are machine words, not `T`
                        ((idx, Some(usize::MAX)), n * 8 / elem as usize, node.activation)
                    }
                };
                if activation && charged.insert(key) {
                    bytes += len as u64 * elem;
                }
            }
            records.push(LedgerRecord {
                index: idx,
                op: node.op.name(),
                region: node.region.to_string(),
                retained_bytes: bytes,
            });
        }
        ActivationLedger::from_records(records)
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
