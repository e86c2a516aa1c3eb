//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording; gradients of values that feed several
//! operations accumulate additively.

pub mod gradcheck;
pub mod kernels;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor owned by a network.
///
/// Binding the same parameter twice on one tape yields the same [`Var`], so
/// gradients from every use are summed. Cloning allocates a fresh identity.
#[derive(Debug)]
pub struct Param<T: Element = f32> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

impl<T: Element> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

/// Clamp used wherever a probability enters a logarithm.
pub const PROB_EPS: f64 = 1e-7;

enum Op<T: Element> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    ChannelBias { input: Var, bias: Var },
    Activation { input: Var, kind: Activation },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, window: usize },
    GlobalAvgPool { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Upsample { input: Var, factor: usize },
    Reshape { input: Var },
    ChannelGate { input: Var, gate: Var },
    ConcatColumns { inputs: Vec<Var> },
    SelectColumns { input: Var, indices: Vec<usize> },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Bce { pred: Var, target: Vec<T> },
    MeanAbs { input: Var },
    BatchMeanNegEntropy { input: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push_with(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a network parameter, reusing the existing leaf if already bound.
    pub fn param(&mut self, param: &Param<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&param.id) {
            return v;
        }
        let v = self.leaf(param.value.clone().with_requires_grad(trainable));
        self.params.insert(param.id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn param_grad(&self, param: &Param<T>) -> Option<&[T]> {
        self.params.get(&param.id).and_then(|&v| self.grad(v))
    }

    pub fn is_bound(&self, param: &Param<T>) -> bool {
        self.params.contains_key(&param.id)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (n, c, h, w) = self.value(input).dims4("conv2d")?;
        let (k, kc, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let geom = ConvGeom { channels: c, height: h, width: w, kh, kw, stride, padding };
        let out = kernels::conv2d_forward(self.value(input).data(), n, k, self.value(kernel).data(), &geom);
        let value = Tensor::new(&[n, k, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, H, W]` map.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("add_channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_channel_bias", self.shape(input), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        let plane = h * w;
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                out[off..off + plane].iter_mut().for_each(|v| *v = *v + b[ch]);
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelBias { input, bias }, &[input, bias]))
    }

    pub fn elementwise(&mut self, kind: Activation, input: Var) -> Var {
        let value = self.value(input).map(|x| kind.apply(x));
        self.push(value, Op::Activation { input, kind }, &[input])
    }

    pub fn pool(&mut self, kind: PoolKind, input: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("pool")?;
        if kind == PoolKind::GlobalAvg {
            let plane = h * w;
            let inv = T::lit(1.0 / plane as f64);
            let data = self.value(input).data();
            let out: Vec<T> = (0..n * c)
                .map(|i| data[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
                .collect();
            let value = Tensor::new(&[n, c, 1, 1], out)?;
            return Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]));
        }
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::invalid(
                "pool",
                format!("window {window} does not divide the {h}x{w} map"),
            ));
        }
        let (ho, wo) = (h / window, w / window);
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::lit(1.0 / (window * window) as f64);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + (i * window) * w + j * window;
                    let mut acc = T::zero();
                    for a in 0..window {
                        for b in 0..window {
                            let idx = base + (i * window + a) * w + j * window + b;
                            acc = acc + data[idx];
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(data[best]);
                            argmax.push(best);
                        }
                        _ => out.push(acc * inv),
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            _ => Op::AvgPool { input, window },
        };
        Ok(self.push(value, op, &[input]))
    }

    /// `input [N, D] * weight [D, E] + bias [E]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(input).dims2("dense")?;
        let (wd, e) = self.value(weight).dims2("dense")?;
        if wd != d {
            return Err(Error::shape("dense", self.shape(input), self.shape(weight)));
        }
        if self.shape(bias) != [e] {
            return Err(Error::shape("dense", self.shape(weight), self.shape(bias)));
        }
        let mut out = vec![T::zero(); n * e];
        for row in out.chunks_mut(e) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(n, d, e, self.value(input).data(), d, 1, self.value(weight).data(), e, 1, T::one(), &mut out);
        let value = Tensor::new(&[n, e], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be at least 1"));
        }
        let (n, c, h, w) = self.value(input).dims4("upsample")?;
        if factor == 1 {
            let value = self.value(input).clone();
            return Ok(self.push(value, Op::Upsample { input, factor }, &[input]));
        }
        let (ho, wo) = (h * factor, w * factor);
        let data = self.value(input).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[plane * ho * wo + i * wo + j] = data[plane * h * w + (i / factor) * w + j / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }, &[input]))
    }

    /// Upsamples by `factor` then convolves with size-preserving padding.
    pub fn upsample_conv(&mut self, input: Var, kernel: Var, factor: usize) -> Result<Var> {
        let (_, _, kh, kw) = self.value(kernel).dims4("upsample_conv")?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "upsample_conv",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        let up = self.upsample(input, factor)?;
        self.conv2d(up, kernel, 1, kh / 2)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Scales each channel of `[N, C, H, W]` by `gate [N, C]`.
    pub fn channel_gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_gate")?;
        if self.shape(gate) != [n, c] {
            return Err(Error::shape("channel_gate", self.shape(input), self.shape(gate)));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * g[i]);
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelGate { input, gate }, &[input, gate]))
    }

    /// Concatenates `[N, D_i]` tensors along the column axis.
    pub fn concat_columns(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_columns", "no inputs"))?;
        let (n, _) = self.value(first).dims2("concat_columns")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (rn, d) = self.value(v).dims2("concat_columns")?;
            if rn != n {
                return Err(Error::shape("concat_columns", self.shape(first), self.shape(v)));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&v, &d) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[row * d..(row + 1) * d]);
            }
        }
        let value = Tensor::new(&[n, total], out)?;
        Ok(self.push(value, Op::ConcatColumns { inputs: inputs.to_vec() }, inputs))
    }

    /// Keeps the listed columns of `[N, D]`, in the given order.
    pub fn select_columns(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.value(input).dims2("select_columns")?;
        if indices.is_empty() {
            return Err(Error::invalid("select_columns", "empty column selection"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::invalid("select_columns", format!("column {bad} out of width {d}")));
        }
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(n * indices.len());
        for row in 0..n {
            out.extend(indices.iter().map(|&i| data[row * d + i]));
        }
        let value = Tensor::new(&[n, indices.len()], out)?;
        Ok(self.push(value, Op::SelectColumns { input, indices: indices.to_vec() }, &[input]))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape("add", self.shape(lhs), self.shape(rhs)));
        }
        let r = self.value(rhs).data();
        let data = self.value(lhs).data().iter().zip(r).map(|(&a, &b)| a + b).collect();
        let value = Tensor::new(self.shape(lhs), data)?;
        Ok(self.push(value, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape("mul", self.shape(lhs), self.shape(rhs)));
        }
        let r = self.value(rhs).data();
        let data = self.value(lhs).data().iter().zip(r).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(self.shape(lhs), data)?;
        Ok(self.push(value, Op::Mul { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    /// Sums a list of same-shaped nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Mean binary cross-entropy of `pred` against constant soft targets.
    ///
    /// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the log.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("bce", self.shape(pred), target.shape()));
        }
        let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
        let n = target.numel();
        let mut acc = T::zero();
        for (&y, &t) in self.value(pred).data().iter().zip(target.data()) {
            let y = y.max(lo).min(hi);
            acc = acc - (t * y.ln() + (T::one() - t) * (T::one() - y).ln());
        }
        let value = Tensor::scalar(acc / T::lit(n as f64));
        Ok(self.push(value, Op::Bce { pred, target: target.data().to_vec() }, &[pred]))
    }

    pub fn mean_abs(&mut self, input: Var) -> Var {
        let d = self.value(input).data();
        let s: T = d.iter().map(|x| x.abs()).sum();
        let value = Tensor::scalar(s / T::lit(d.len() as f64));
        self.push(value, Op::MeanAbs { input }, &[input])
    }

    /// `sum_c p_c ln p_c` where `p` is the batch-mean of `[N, C]` rows
    /// renormalised to sum to one.
    pub fn batch_mean_neg_entropy(&mut self, input: Var) -> Result<Var> {
        let (n, c) = self.value(input).dims2("info_entropy")?;
        let p = batch_mean_distribution(self.value(input).data(), n, c)?;
        let s: T = p.iter().map(|&pc| xlogx(pc)).sum();
        Ok(self.push(Tensor::scalar(s), Op::BatchMeanNegEntropy { input }, &[input]))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every `requires_grad` leaf reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let value = &mut self.nodes[i].value;
                match &mut value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => value.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a contribution to `v`'s gradient buffer, allocating on first use.
    fn accum<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (n, k) = (out.shape()[0], out.shape()[1]);
                let x = self.value(*input).data();
                let kd = self.value(*kernel).data();
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); kd.len()]);
                if self.wants(*input) {
                    let dx = self.accum(grads, *input);
                    kernels::conv2d_backward(x, n, k, kd, g, geom, Some(dx), dk.as_deref_mut());
                } else {
                    kernels::conv2d_backward(x, n, k, kd, g, geom, None, dk.as_deref_mut());
                }
                if let Some(dk) = dk {
                    add_into(self.accum(grads, *kernel), &dk);
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*input) {
                    add_into(self.accum(grads, *input), g);
                }
                if self.wants(*bias) {
                    let (n, c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2], out.shape()[3]);
                    let db = self.accum(grads, *bias);
                    for s in 0..n {
                        for (ch, d) in db.iter_mut().enumerate().take(c) {
                            let off = (s * c + ch) * h * w;
                            *d = *d + g[off..off + h * w].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = out.data();
                let dx = self.accum(grads, *input);
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[j] * kind.derivative(x[j], y[j]);
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = self.accum(grads, *input);
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
            }
            Op::AvgPool { input, window } => {
                let (n, c, h, w) = self.value(*input).dims4("pool").expect("recorded shape");
                let (ho, wo) = (h / window, w / window);
                let inv = T::lit(1.0 / (window * window) as f64);
                let dx = self.accum(grads, *input);
                for plane in 0..n * c {
                    for a in 0..h {
                        for b in 0..w {
                            let gv = g[plane * ho * wo + (a / window) * wo + b / window];
                            let idx = plane * h * w + a * w + b;
                            dx[idx] = dx[idx] + gv * inv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let plane = self.value(*input).numel() / g.len();
                let inv = T::lit(1.0 / plane as f64);
                let dx = self.accum(grads, *input);
                for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + g[j] * inv);
                }
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = (self.shape(*input)[0], self.shape(*input)[1]);
                let e = out.shape()[1];
                if self.wants(*input) {
                    let w = self.value(*weight).data();
                    let dx = self.accum(grads, *input);
                    // dX[N, D] += dY[N, E] * W^T
                    T::gemm(n, e, d, g, e, 1, w, 1, e, T::one(), dx);
                }
                if self.wants(*weight) {
                    let x = self.value(*input).data();
                    let dw = self.accum(grads, *weight);
                    // dW[D, E] += X^T * dY
                    T::gemm(d, n, e, x, 1, d, g, e, 1, T::one(), dw);
                }
                if self.wants(*bias) {
                    let db = self.accum(grads, *bias);
                    for row in g.chunks(e) {
                        add_into(db, row);
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let (n, c, h, w) = self.value(*input).dims4("upsample").expect("recorded shape");
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                let dx = self.accum(grads, *input);
                for plane in 0..n * c {
                    for a in 0..ho {
                        for b in 0..wo {
                            let idx = plane * h * w + (a / f) * w + b / f;
                            dx[idx] = dx[idx] + g[plane * ho * wo + a * wo + b];
                        }
                    }
                }
            }
            Op::Reshape { input } => add_into(self.accum(grads, *input), g),
            Op::ChannelGate { input, gate } => {
                let plane = out.numel() / self.value(*gate).numel();
                if self.wants(*input) {
                    let gate_v = self.value(*gate).data();
                    let dx = self.accum(grads, *input);
                    for (j, chunk) in dx.chunks_mut(plane).enumerate() {
                        let gj = &g[j * plane..(j + 1) * plane];
                        chunk.iter_mut().zip(gj).for_each(|(d, &gv)| *d = *d + gv * gate_v[j]);
                    }
                }
                if self.wants(*gate) {
                    let x = self.value(*input).data();
                    let dg = self.accum(grads, *gate);
                    for (j, d) in dg.iter_mut().enumerate() {
                        let s: T = x[j * plane..(j + 1) * plane]
                            .iter()
                            .zip(&g[j * plane..(j + 1) * plane])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        *d = *d + s;
                    }
                }
            }
            Op::ConcatColumns { inputs } => {
                let n = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[1];
                    if self.wants(v) {
                        let dx = self.accum(grads, v);
                        for row in 0..n {
                            let src = &g[row * total + offset..row * total + offset + d];
                            add_into(&mut dx[row * d..(row + 1) * d], src);
                        }
                    }
                    offset += d;
                }
            }
            Op::SelectColumns { input, indices } => {
                let d = self.shape(*input)[1];
                let k = indices.len();
                let dx = self.accum(grads, *input);
                for (row, grow) in g.chunks(k).enumerate() {
                    for (&col, &gv) in indices.iter().zip(grow) {
                        dx[row * d + col] = dx[row * d + col] + gv;
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [*lhs, *rhs] {
                    if self.wants(v) {
                        add_into(self.accum(grads, v), g);
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                for (v, other) in [(*lhs, *rhs), (*rhs, *lhs)] {
                    if self.wants(v) {
                        let o = self.value(other).data();
                        let dx = self.accum(grads, v);
                        for j in 0..dx.len() {
                            dx[j] = dx[j] + g[j] * o[j];
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                let dx = self.accum(grads, *input);
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *factor);
            }
            Op::Sum { input } => {
                let dx = self.accum(grads, *input);
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::Bce { pred, target } => {
                let (lo, hi) = (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS));
                let y = self.value(*pred).data();
                let inv_n = T::lit(1.0 / target.len() as f64);
                let dx = self.accum(grads, *pred);
                for j in 0..dx.len() {
                    // The clamp is flat outside its range.
                    if y[j] < lo || y[j] > hi {
                        continue;
                    }
                    let t = target[j];
                    let dl = -(t / y[j]) + (T::one() - t) / (T::one() - y[j]);
                    dx[j] = dx[j] + g[0] * dl * inv_n;
                }
            }
            Op::MeanAbs { input } => {
                let x = self.value(*input).data();
                let inv_n = T::lit(1.0 / x.len() as f64);
                let dx = self.accum(grads, *input);
                for j in 0..dx.len() {
                    dx[j] = dx[j] + g[0] * sign(x[j]) * inv_n;
                }
            }
            Op::BatchMeanNegEntropy { input } => {
                let (n, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let x = self.value(*input).data();
                let p = batch_mean_distribution(x, n, c).expect("validated in forward");
                let total: T = (0..c)
                    .map(|k| (0..n).map(|r| x[r * c + k]).sum::<T>() / T::lit(n as f64))
                    .sum();
                let neg_h: T = p.iter().map(|&pc| xlogx(pc)).sum();
                let tiny = T::min_positive_value();
                let dx = self.accum(grads, *input);
                for k in 0..c {
                    // d/dm_k of sum p ln p with p = m / sum(m)
                    let dm = (p[k].max(tiny).ln() - neg_h) / total;
                    let dy = g[0] * dm / T::lit(n as f64);
                    for r in 0..n {
                        dx[r * c + k] = dx[r * c + k] + dy;
                    }
                }
            }
        }
    }
}

/// Subgradient of `|x|` with `0` at the kink.
fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn xlogx<T: Element>(x: T) -> T {
    if x > T::zero() {
        x * x.ln()
    } else {
        T::zero()
    }
}

fn batch_mean_distribution<T: Element>(x: &[T], n: usize, c: usize) -> Result<Vec<T>> {
    let means: Vec<T> = (0..c)
        .map(|k| (0..n).map(|r| x[r * c + k]).sum::<T>() / T::lit(n as f64))
        .collect();
    if means.iter().any(|&m| m < T::zero()) {
        return Err(Error::Domain {
            op: "info_entropy",
            detail: "negative label mean".into(),
        });
    }
    let total: T = means.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::Domain {
            op: "info_entropy",
            detail: "batch-mean prediction is identically zero".into(),
        });
    }
    Ok(means.into_iter().map(|m| m / total).collect())
}
