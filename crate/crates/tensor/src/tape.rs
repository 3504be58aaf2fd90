//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when
//! gradients are enabled, the operand handles plus whatever it must save for
//! the backward pass. [`Tape::backward`] walks the nodes in reverse order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Border, Conv2dSpec, PoolSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatLayout};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, invstd: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Resize { x: Var, border: Border },
    DiceBce { logits: Var, target: Arc<Tensor<T>>, eps: T },
    Dot { x: Var, weights: Arc<Tensor<T>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalizes in double precision so long single-precision rows still sum
/// to one within a few ulps.
fn softmax_rows<T: Scalar>(data: &mut [T], len: usize) {
    for row in data.chunks_mut(len) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = 0f64;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += v.to_f64_lossy();
        }
        for v in row.iter_mut() {
            *v = T::lit(v.to_f64_lossy() / s);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records operations for differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, macs: 0 }
    }

    /// Tape that only evaluates; [`Tape::backward`] yields no gradients.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, macs: 0 }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates executed by convolutions, dense layers and matrix products.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        self.push_shared(Arc::new(value), op, parents)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: Arc::new(t), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf sharing storage with `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: store.shared(id), op: if needs_grad { Op::Param(id) } else { Op::Leaf }, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch { op, expected: self.shape(a).to_vec(), got: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let len = *t.shape().last().ok_or(TensorError::RankMismatch { op: "softmax", expected: 1, got: 0 })?;
        let mut v = t.clone();
        softmax_rows(v.data_mut(), len);
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let (n, c_out, ho, wo) = v.dims4()?;
        self.macs += spec.macs(n, self.shape(x)[1], c_out, ho, wo);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }, &parents))
    }

    /// `x[..., d_in] @ w[d_in, d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (din, dout) = match wt.shape() {
            &[a, b] => (a, b),
            s => return Err(TensorError::RankMismatch { op: "linear weight", expected: 2, got: s.len() }),
        };
        if xt.shape().last() != Some(&din) {
            return Err(TensorError::ShapeMismatch { op: "linear", expected: vec![din], got: xt.shape().to_vec() });
        }
        let rows = xt.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(T::one(), xt.data(), MatLayout::new(rows, din, false), wt.data(), MatLayout::new(din, dout, false), T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != dout {
                return Err(TensorError::ShapeMismatch { op: "linear bias", expected: vec![dout], got: vec![bd.len()] });
            }
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        self.macs += (rows * din * dout) as u64;
        let v = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &parents))
    }

    /// Batched product of rank-3 operands, `op(a) @ op(b)` where `op` transposes
    /// the trailing two axes when the flag is set.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ba, a0, a1) = self.value(a).dims3()?;
        let (bb, b0, b1) = self.value(b).dims3()?;
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
        if ba != bb || k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", expected: self.shape(a).to_vec(), got: self.shape(b).to_vec() });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            gemm(
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                MatLayout::new(m, k, ta),
                &bd[i * k * n..(i + 1) * k * n],
                MatLayout::new(k, n, tb),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.macs += (ba * m * k * n) as u64;
        let v = Tensor::from_vec(&[ba, m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// returned for the caller's running-average update; otherwise the given
    /// running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        train: bool,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let hw = h * w;
        let count = n * hw;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != c || bt.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch { op: "batch_norm", expected: vec![c], got: vec![g.len()] });
        }
        let xd = xt.data();
        let (mean, var, stats) = if train {
            if count < 2 {
                return Err(TensorError::InvalidArgument("batch_norm: training needs > 1 value per channel".into()));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s += xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / T::lit(count as f64);
                let mut q = T::zero();
                for ni in 0..n {
                    for &v in &xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                        q += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = q / T::lit(count as f64);
            }
            let unbiased = var.iter().map(|&v| v * T::lit(count as f64 / (count - 1) as f64)).collect();
            let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
            (mean, var, Some(stats))
        } else {
            (running_mean.to_vec(), running_var.to_vec(), None)
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ch in 0..c {
                let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                for ((o, xh), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r]) {
                    *xh = (v - mean[ch]) * invstd[ch];
                    *o = *xh * g[ch] + bt[ch];
                }
            }
        }
        let shape = xt.shape().to_vec();
        let v = Tensor::from_vec(&shape, out)?;
        let xhat = if self.grad_enabled { Tensor::from_vec(&shape, xhat)? } else { Tensor::zeros(&[0]) };
        Ok((self.push(v, Op::BatchNorm { x, gamma, beta, xhat, invstd, train }, &[x, gamma, beta]), stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().ok_or(TensorError::RankMismatch { op: "layer_norm", expected: 1, got: 0 })?;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != d || bt.len() != d {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", expected: vec![d], got: vec![g.len()] });
        }
        let mut xhat = xt.clone();
        let mut out = xt.clone();
        let mut rstd = Vec::with_capacity(xt.numel() / d.max(1));
        for (row, orow) in xhat.data_mut().chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
            let m = row.iter().copied().sum::<T>() / T::lit(d as f64);
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::lit(d as f64);
            let r = T::one() / (var + eps).sqrt();
            for (i, (v, o)) in row.iter_mut().zip(orow.iter_mut()).enumerate() {
                *v = (*v - m) * r;
                *o = *v * g[i] + bt[i];
            }
            rstd.push(r);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn maxpool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (v, argmax) = kernels::maxpool2d(self.value(x), &spec)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = kernels::avgpool2d(self.value(x), k)?;
        Ok(self.push(v, Op::AvgPool { x, k }, &[x]))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize, border: Border) -> Result<Var> {
        let v = kernels::resize_bilinear(self.value(x), h, w, border)?;
        Ok(self.push(v, Op::Resize { x, border }, &[x]))
    }

    /// Mean over the batch of `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` with
    /// `p = sigmoid(logits)`, plus the mean binary cross-entropy with logits.
    pub fn dice_bce(&mut self, logits: Var, target: Arc<Tensor<T>>, eps: T) -> Result<Var> {
        let z = self.value(logits);
        z.expect_same_shape("dice_bce", &target)?;
        let batch = z.shape().first().copied().unwrap_or(1).max(1);
        let per = z.numel() / batch;
        let zd = z.data();
        let gd = target.data();
        let mut bce = T::zero();
        let mut dice = T::zero();
        for b in 0..batch {
            let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
            for i in b * per..(b + 1) * per {
                let (zi, gi) = (zd[i], gd[i]);
                let p = sigmoid(zi);
                inter += p * gi;
                sp += p;
                sg += gi;
                bce += zi.max(T::zero()) - zi * gi + (T::one() + (-zi.abs()).exp()).ln();
            }
            dice += T::one() - (T::lit(2.0) * inter + eps) / (sp + sg + eps);
        }
        let loss = dice / T::lit(batch as f64) + bce / T::lit(zd.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::DiceBce { logits, target, eps }, &[logits]))
    }

    /// `sum(x * weights)` for a fixed weight tensor; a convenient scalar probe.
    pub fn dot_const(&mut self, x: Var, weights: Arc<Tensor<T>>) -> Result<Var> {
        let xt = self.value(x);
        xt.expect_same_shape("dot_const", &weights)?;
        let s = xt.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x]))
    }

    /// Back-propagates from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidArgument("backward: loss must be a scalar".into()));
        }
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contribs = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (p, pg) in contribs {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match params.get_mut(id) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?), (*b, g.zip_map(self.value(*a), |gv, av| gv * av)?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Relu(a) => vec![(*a, g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() })?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(self.value(*a), |gv, xv| gv * gelu_grad(xv))?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?)],
            Op::Softmax(a) => {
                let len = *y.shape().last().unwrap();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(len).zip(y.data().chunks(len)) {
                    let dotv: T = drow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dotv);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.shape(*a))?)],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, g.permute(&inv)?)]
            }
            Op::Narrow { x, axis, start } => {
                let src = self.shape(*x);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut dx = Tensor::zeros(src);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if want(p) {
                        out.push((p, g.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
                out
            }
            Op::Conv2d { x, w, b, spec } => {
                let gr = kernels::conv2d_backward(self.value(*x), self.value(*w), spec, g, want(*x), want(*w), b.is_some_and(want))?;
                let mut out = Vec::new();
                if let Some(dx) = gr.input {
                    out.push((*x, dx));
                }
                if let Some(dw) = gr.weight {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, gr.bias) {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (din, dout) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.numel() / din;
                let mut out = Vec::new();
                if want(*x) {
                    let mut dx = vec![T::zero(); xt.numel()];
                    gemm(T::one(), g.data(), MatLayout::new(rows, dout, false), wt.data(), MatLayout::new(dout, din, true), T::zero(), &mut dx);
                    out.push((*x, Tensor::from_vec(xt.shape(), dx)?));
                }
                if want(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(T::one(), xt.data(), MatLayout::new(din, rows, true), g.data(), MatLayout::new(rows, dout, false), T::zero(), &mut dw);
                    out.push((*w, Tensor::from_vec(wt.shape(), dw)?));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((b, Tensor::from_vec(&[dout], db)?));
                }
                out
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let at = self.value(*a);
                let bt = self.value(*b);
                let (batch, m, n) = y.dims3()?;
                let k = if ta { at.shape()[1] } else { at.shape()[2] };
                let mut out = Vec::new();
                if want(*a) {
                    let mut da = vec![T::zero(); at.numel()];
                    for i in 0..batch {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        let bs = &bt.data()[i * k * n..(i + 1) * k * n];
                        let dst = &mut da[i * m * k..(i + 1) * m * k];
                        if !ta {
                            // dA[m,k] = G[m,n] op(B)^T[n,k]
                            gemm(T::one(), gs, MatLayout::new(m, n, false), bs, MatLayout::new(n, k, !tb), T::zero(), dst);
                        } else {
                            // dA[k,m] = op(B)[k,n] G^T[n,m]
                            gemm(T::one(), bs, MatLayout::new(k, n, tb), gs, MatLayout::new(n, m, true), T::zero(), dst);
                        }
                    }
                    out.push((*a, Tensor::from_vec(at.shape(), da)?));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); bt.numel()];
                    for i in 0..batch {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        let as_ = &at.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if !tb {
                            // dB[k,n] = op(A)^T[k,m] G[m,n]
                            gemm(T::one(), as_, MatLayout::new(k, m, !ta), gs, MatLayout::new(m, n, false), T::zero(), dst);
                        } else {
                            // dB[n,k] = G^T[n,m] op(A)[m,k]
                            gemm(T::one(), gs, MatLayout::new(n, m, true), as_, MatLayout::new(m, k, ta), T::zero(), dst);
                        }
                    }
                    out.push((*b, Tensor::from_vec(bt.shape(), db)?));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let (n, c, h, w) = g.dims4()?;
                let hw = h * w;
                let count = T::lit((n * hw) as f64);
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let xh = xhat.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                        for (&gv, &xv) in gd[r.clone()].iter().zip(&xh[r]) {
                            dgamma[ch] += gv * xv;
                            dbeta[ch] += gv;
                        }
                    }
                }
                let mut out = Vec::new();
                if want(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let r = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                            let scale = gam[ch] * invstd[ch];
                            for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xh[r]) {
                                *d = if *train { scale * (gv - dbeta[ch] / count - xv * dgamma[ch] / count) } else { scale * gv };
                            }
                        }
                    }
                    out.push((*x, Tensor::from_vec(g.shape(), dx)?));
                }
                out.push((*gamma, Tensor::from_vec(&[c], dgamma)?));
                out.push((*beta, Tensor::from_vec(&[c], dbeta)?));
                out
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *g.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.numel()];
                let dn = T::lit(d as f64);
                for (((grow, xrow), drow), &r) in g.data().chunks(d).zip(xhat.data().chunks(d)).zip(dx.chunks_mut(d)).zip(rstd) {
                    let mut sum_gy = T::zero();
                    let mut sum_gyx = T::zero();
                    for i in 0..d {
                        dgamma[i] += grow[i] * xrow[i];
                        dbeta[i] += grow[i];
                        let gy = grow[i] * gam[i];
                        sum_gy += gy;
                        sum_gyx += gy * xrow[i];
                    }
                    for i in 0..d {
                        let gy = grow[i] * gam[i];
                        drow[i] = r * (gy - sum_gy / dn - xrow[i] * sum_gyx / dn);
                    }
                }
                vec![(*x, Tensor::from_vec(g.shape(), dx)?), (*gamma, Tensor::from_vec(&[d], dgamma)?), (*beta, Tensor::from_vec(&[d], dbeta)?)]
            }
            Op::MaxPool { x, argmax } => vec![(*x, kernels::maxpool2d_backward(self.shape(*x), argmax, g)?)],
            Op::AvgPool { x, k } => vec![(*x, kernels::avgpool2d_backward(self.shape(*x), *k, g)?)],
            Op::Resize { x, border } => vec![(*x, kernels::resize_bilinear_backward(self.shape(*x), g, *border)?)],
            Op::DiceBce { logits, target, eps } => {
                let z = self.value(*logits);
                let batch = z.shape().first().copied().unwrap_or(1).max(1);
                let per = z.numel() / batch;
                let scale = g.data()[0];
                let total = T::lit(z.numel() as f64);
                let bn = T::lit(batch as f64);
                let zd = z.data();
                let gd = target.data();
                let mut dz = vec![T::zero(); zd.len()];
                for b in 0..batch {
                    let r = b * per..(b + 1) * per;
                    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
                    for i in r.clone() {
                        let p = sigmoid(zd[i]);
                        inter += p * gd[i];
                        sp += p;
                        sg += gd[i];
                    }
                    let den = sp + sg + *eps;
                    let num = T::lit(2.0) * inter + *eps;
                    for i in r {
                        let p = sigmoid(zd[i]);
                        let ddice_dp = -(T::lit(2.0) * gd[i] * den - num) / (den * den);
                        let dbce = (p - gd[i]) / total;
                        dz[i] = scale * (ddice_dp * p * (T::one() - p) / bn + dbce);
                    }
                }
                vec![(*logits, Tensor::from_vec(z.shape(), dz)?)]
            }
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                vec![(*x, weights.scale(s))]
            }
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any tape node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, summed over every use on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}
