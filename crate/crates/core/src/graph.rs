//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, checks its output for NaN/Inf, and records enough to run its
//! backward rule. [`Graph::backward`] walks the nodes in exact reverse
//! insertion order and accumulates gradients additively, so a value used by
//! several consumers receives the sum of their contributions.

use crate::conv::{self, Padding};
use crate::dynfilter;
use crate::error::{Error, Result};
use crate::losses::{self, HuberMode, Reduction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Neg(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    BiasAdd(Var, Var),
    Conv3d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    AvgPool(Var, usize),
    MeanTrailing(Var, usize),
    MaxTrailing(Var, usize),
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    ApplyFilters {
        clip: Var,
        filters: Var,
    },
    Huber {
        pred: Var,
        target: Var,
        delta: S,
        mode: HuberMode,
        reduction: Reduction,
    },
    CrossEntropy(Var, usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Recorded computation graph over scalar type `S`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("input", value, Op::Leaf, false)
    }

    /// Trainable leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("add", x, y)?;
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect())?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("sub", x, y)?;
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect())?;
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same("mul", x, y)?;
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect())?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&p| p * c).collect())?;
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&p| -p).collect())?;
        let rg = self.rg(&[a]);
        self.push("neg", out, Op::Neg(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape(),
            x.data().iter().map(|&p| if p > S::zero() { p } else { S::zero() }).collect(),
        )?;
        let rg = self.rg(&[a]);
        self.push("relu", out, Op::Relu(a), rg)
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {:?}", x.shape())));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let out = Tensor::new(vec![n, m], transpose_raw(x.data(), m, n))?;
        let rg = self.rg(&[a]);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// Flattens every operand and joins them into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let n = data.len();
        let rg = self.rg(parts);
        self.push("concat", Tensor::new(vec![n], data)?, Op::Concat(parts.to_vec()), rg)
    }

    /// Adds `bias[c]` to every element of slice `x[c, ...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() == 0 || bv.rank() != 1 || bv.len() != xv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let inner = xv.len() / bv.len();
        let mut out = xv.data().to_vec();
        for (c, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let b = bv.data()[c];
            for v in chunk {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, bias]);
        self.push("bias_add", out, Op::BiasAdd(x, bias), rg)
    }

    /// 3D cross-correlation of `C×T×H×W` input with `C'×C×kt×kh×kw` kernels.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.rg(&[input, kernel]);
        self.push(
            "conv3d",
            out,
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        )
    }

    /// Non-overlapping `k×k` average pooling over the last two axes.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = conv::avg_pool_forward(self.value(x), k)?;
        let rg = self.rg(&[x]);
        self.push("avg_pool", out, Op::AvgPool(x, k), rg)
    }

    /// Mean over every axis after the first `keep` axes.
    pub fn mean_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let xv = self.value(x);
        if keep > xv.rank() {
            return Err(Error::invalid("mean_trailing", format!("keep {keep} > rank {}", xv.rank())));
        }
        let outer: usize = xv.shape()[..keep].iter().product();
        let inner = xv.len() / outer.max(1);
        if inner == 0 {
            return Err(Error::invalid("mean_trailing", "empty reduction"));
        }
        let norm = S::lit(inner as f64);
        let out: Vec<S> = xv
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<S>() / norm)
            .collect();
        let out = Tensor::new(xv.shape()[..keep].to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("mean_trailing", out, Op::MeanTrailing(x, keep), rg)
    }

    /// Maximum over all axes after the first `keep`. The gradient goes to the
    /// first maximal element of each slice.
    pub fn max_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let xv = self.value(x);
        if keep > xv.rank() {
            return Err(Error::invalid("max_trailing", format!("keep {keep} > rank {}", xv.rank())));
        }
        let outer: usize = xv.shape()[..keep].iter().product();
        let inner = xv.len() / outer.max(1);
        if inner == 0 {
            return Err(Error::invalid("max_trailing", "empty reduction"));
        }
        let out: Vec<S> = xv.data().chunks(inner).map(|c| c[argmax_first(c)]).collect();
        let out = Tensor::new(xv.shape()[..keep].to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("max_trailing", out, Op::MaxTrailing(x, keep), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<S>() / S::lit(xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let out = Tensor::new(xv.shape(), softmax_raw(xv.data(), xv.shape(), axis))?;
        let rg = self.rg(&[x]);
        self.push("softmax", out, Op::Softmax(x, axis), rg)
    }

    pub(crate) fn push_apply_filters(&mut self, clip: Var, filters: Var, out: Tensor<S>) -> Result<Var> {
        let rg = self.rg(&[clip, filters]);
        self.push("apply_filters", out, Op::ApplyFilters { clip, filters }, rg)
    }

    pub(crate) fn push_huber(
        &mut self,
        pred: Var,
        target: Var,
        delta: S,
        mode: HuberMode,
        reduction: Reduction,
        value: S,
    ) -> Result<Var> {
        let rg = self.rg(&[pred, target]);
        self.push(
            "huber_fp",
            Tensor::scalar(value),
            Op::Huber {
                pred,
                target,
                delta,
                mode,
                reduction,
            },
            rg,
        )
    }

    pub(crate) fn push_cross_entropy(&mut self, logits: Var, label: usize, value: S) -> Result<Var> {
        let rg = self.rg(&[logits]);
        self.push("cross_entropy", Tensor::scalar(value), Op::CrossEntropy(logits, label), rg)
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// trainable leaf's gradient. Gradients persist until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty graph"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: Vec<S>, grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut send = |v: Var, d: Vec<S>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*b) {
                    send(*b, g.clone());
                }
                send(*a, g);
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    send(*b, g.iter().map(|&x| -x).collect());
                }
                send(*a, g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.iter().zip(val(*b).data()).map(|(&d, &y)| d * y).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&d| d * *c).collect()),
            Op::Neg(a) => send(*a, g.iter().map(|&d| -d).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(&d, &x)| if x > S::zero() { d } else { S::zero() })
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(y.data(), k, n);
                    send(*a, matmul_raw(&g, &bt, m, n, k));
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(x.data(), m, k);
                    send(*b, matmul_raw(&at, &g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                send(*a, transpose_raw(&g, s[1], s[0]));
            }
            Op::Reshape(a) => send(*a, g),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if rg(*p) {
                        send(*p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::BiasAdd(x, b) => {
                if rg(*b) {
                    let nb = val(*b).len();
                    let inner = (g.len() / nb).max(1);
                    send(*b, g.chunks(inner).map(|c| c.iter().copied().sum::<S>()).collect());
                }
                send(*x, g);
            }
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = conv::conv3d_backward(
                    val(*input),
                    val(*kernel),
                    &g,
                    *stride,
                    *padding,
                    rg(*input),
                    rg(*kernel),
                )?;
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::AvgPool(x, k) => send(*x, conv::avg_pool_backward(val(*x).shape(), *k, &g)),
            Op::MeanTrailing(x, keep) => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*keep].iter().product();
                let inner = xv.len() / outer.max(1);
                let norm = S::lit(inner as f64);
                let mut d = Vec::with_capacity(xv.len());
                for &go in &g {
                    d.extend(std::iter::repeat_n(go / norm, inner));
                }
                send(*x, d);
            }
            Op::MaxTrailing(x, keep) => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*keep].iter().product();
                let inner = xv.len() / outer.max(1);
                let mut d = vec![S::zero(); xv.len()];
                for (o, c) in xv.data().chunks(inner).enumerate() {
                    d[o * inner + argmax_first(c)] = g[o];
                }
                send(*x, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / S::lit(n as f64); n]);
            }
            Op::Softmax(x, axis) => {
                let y = &nodes[i].value;
                send(*x, softmax_backward_raw(y.data(), &g, y.shape(), *axis));
            }
            Op::ApplyFilters { clip, filters } => {
                let (dclip, dfilt) =
                    dynfilter::apply_filters_backward(val(*clip), val(*filters), &g, rg(*clip), rg(*filters));
                if let Some(d) = dclip {
                    send(*clip, d);
                }
                if let Some(d) = dfilt {
                    send(*filters, d);
                }
            }
            Op::Huber {
                pred,
                target,
                delta,
                mode,
                reduction,
            } => {
                let d = losses::huber_grad_raw(val(*pred), val(*target), *delta, *mode, *reduction);
                let d: Vec<S> = d.into_iter().map(|v| v * g[0]).collect();
                if rg(*target) {
                    send(*target, d.iter().map(|&v| -v).collect());
                }
                send(*pred, d);
            }
            Op::CrossEntropy(logits, label) => {
                let mut p = softmax_raw(val(*logits).data(), val(*logits).shape(), 0);
                p[*label] -= S::one();
                send(*logits, p.into_iter().map(|v| v * g[0]).collect());
            }
        }
        Ok(())
    }

    /// Hash of which side of every kink the recorded values lie on (relu
    /// input sign, Huber branch, residual sign in linear frame-norm
    /// branches). Two evaluations with equal signatures lie in the same
    /// smooth piece of the graph's function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bit = |b: bool| {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        bit(*v > S::zero());
                    }
                }
                Op::MaxTrailing(x, _) => {
                    let xv = self.value(*x);
                    let inner = xv.len() / node.value.len().max(1);
                    for c in xv.data().chunks(inner) {
                        let k = argmax_first(c);
                        for b in 0..usize::BITS {
                            bit((k >> b) & 1 == 1);
                        }
                    }
                }
                Op::Huber {
                    pred,
                    target,
                    delta,
                    mode,
                    ..
                } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let frames = p.shape().first().copied().unwrap_or(1).max(1);
                    let per = p.len() / frames;
                    for f in 0..frames {
                        let r = p.data()[f * per..(f + 1) * per]
                            .iter()
                            .zip(&t.data()[f * per..(f + 1) * per])
                            .map(|(&a, &b)| a - b);
                        match mode {
                            HuberMode::PerPixel => r.for_each(|v| bit(v.abs() < *delta)),
                            HuberMode::FrameNorm => {
                                let r: Vec<S> = r.collect();
                                let l1: S = r.iter().map(|v| v.abs()).sum();
                                bit(l1 < *delta);
                                if l1 >= *delta {
                                    r.iter().for_each(|v| bit(*v > S::zero()));
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Distance of the recorded evaluation point from the nearest
    /// non-differentiable point: relu inputs at 0, ties in max reductions, Huber residuals (or frame
    /// norms) at `delta`, and `|r| = 0` inside linear frame-norm branches.
    /// `+∞` when the graph has no such op.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        m = m.min(v.to_f64_lossy().abs());
                    }
                }
                Op::MaxTrailing(x, _) => {
                    let xv = self.value(*x);
                    let inner = xv.len() / node.value.len().max(1);
                    for c in xv.data().chunks(inner) {
                        let k = argmax_first(c);
                        for (j, v) in c.iter().enumerate() {
                            if j != k {
                                m = m.min((c[k] - *v).to_f64_lossy());
                            }
                        }
                    }
                }
                Op::Huber {
                    pred,
                    target,
                    delta,
                    mode,
                    ..
                } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let d = delta.to_f64_lossy();
                    let frames = p.shape().first().copied().unwrap_or(1).max(1);
                    let per = p.len() / frames;
                    for f in 0..frames {
                        let r: Vec<f64> = p.data()[f * per..(f + 1) * per]
                            .iter()
                            .zip(&t.data()[f * per..(f + 1) * per])
                            .map(|(&a, &b)| (a - b).to_f64_lossy())
                            .collect();
                        match mode {
                            HuberMode::PerPixel => {
                                for v in &r {
                                    m = m.min((v.abs() - d).abs());
                                }
                            }
                            HuberMode::FrameNorm => {
                                let l1: f64 = r.iter().map(|v| v.abs()).sum();
                                m = m.min((l1 - d).abs());
                                if l1 >= d {
                                    for v in &r {
                                        m = m.min(v.abs());
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }
}

fn argmax_first<S: Scalar>(c: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in c.iter().enumerate() {
        if v > c[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, n, inner) = if shape.is_empty() { (1, 1, 1) } else { axis_layout(shape, axis) };
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let mut m = S::neg_infinity();
            for k in 0..n {
                m = m.max(x[idx(k)]);
            }
            let mut z = S::zero();
            for k in 0..n {
                let e = (x[idx(k)] - m).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[idx(k)] /= z;
            }
        }
    }
    out
}

fn softmax_backward_raw<S: Scalar>(y: &[S], g: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let mut s = S::zero();
            for k in 0..n {
                s += g[idx(k)] * y[idx(k)];
            }
            for k in 0..n {
                dx[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[2], &[3.0, 4.0])).unwrap();
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let r = g.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(r).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let c = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let z = g.scale(c, 0.0).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2])).unwrap();
        let b = g.input(Tensor::zeros(vec![3])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.input(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let q = g.matmul(m, ones).unwrap();
        // scalar-loop oracle
        let (a, b) = ([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]);
        let expect: Vec<f64> = a.iter().map(|r| r[0] * b[0] + r[1] * b[1]).collect();
        assert_eq!(g.value(q).data(), expect.as_slice());
        let z = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let r = g.matmul(m, z).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        assert!(g.matmul(z, m).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(vec![25])).unwrap();
        let p = g.softmax(z, 0).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.04).abs() < 1e-15));
        let l = g.input(t(&[2], &[0.0, 2f64.ln()])).unwrap();
        let p = g.softmax(l, 0).unwrap();
        let (e0, e1) = (1.0, 2f64.ln().exp());
        assert!((g.value(p).data()[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let mut v = vec![0.0; 25];
        v[7] = 50.0;
        let s = g.input(t(&[25], &v)).unwrap();
        let p = g.softmax(s, 0).unwrap();
        assert!(g.value(p).data()[7] > 1.0 - 1e-12);
        assert!(g.softmax(s, 1).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -0.5])).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn two_uses_double_the_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -1.2, 2.5])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let single = g.sum(sq).unwrap();
        g.backward(single).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.zero_grad();
        let other = g.sum(sq).unwrap();
        let both = g.add(single, other).unwrap();
        g.backward(both).unwrap();
        for (a, b) in g.grad(x).unwrap().iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 1.0])).unwrap();
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }
}
