//! Parameterized layers on top of the tape.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, TensorError};
use crate::kernels::Conv2dSpec;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::{Scalar, Tensor};

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats<T>,
}

/// One forward evaluation: a tape bound to a parameter store and a mode.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    train: bool,
    params: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Training-mode graph (batch statistics) that records gradients.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, true, true)
    }

    /// Evaluation-mode graph without gradient recording.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false, false)
    }

    pub fn with_mode(store: &'s ParamStore<T>, train: bool, record: bool) -> Self {
        Self { tape: if record { Tape::new() } else { Tape::no_grad() }, store, train, params: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.params.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies exponential running-average updates recorded during a training forward.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        let m = T::lit(u.momentum);
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, kind, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.add(name, ParamKind::Trainable, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.sample(dist)));
        self.add(name, ParamKind::Trainable, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, ParamKind::Trainable, Tensor::full(shape, T::lit(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, ParamKind::Buffer, Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) weights, zero bias.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let k = spec.kernel;
        let std = (2.0 / (c_out * k * k) as f64).sqrt();
        let weight = b.normal("weight", &[c_out, c_in / spec.groups, k, k], std);
        let bias = bias.then(|| b.constant("bias", &[c_out], 0.0));
        Self { weight, bias, spec, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            gamma: b.constant("weight", &[c], 1.0),
            beta: b.constant("bias", &[c], 0.0),
            running_mean: b.buffer("running_mean", &[c], 0.0),
            running_var: b.buffer("running_var", &[c], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let store = g.store();
        let (rm, rv) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
        let train = g.train;
        let (y, stats) = g.tape.batch_norm(x, gamma, beta, rm, rv, train, T::lit(self.eps))?;
        if let Some(stats) = stats {
            g.bn_updates.push(BnUpdate { running_mean: self.running_mean, running_var: self.running_var, momentum: self.momentum, stats });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weights stored `[d_in, d_out]`, zero bias.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = b.uniform("weight", &[d_in, d_out], bound);
        let bias = bias.then(|| b.constant("bias", &[d_out], 0.0));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        Self { gamma: b.constant("weight", &[d], 1.0), beta: b.constant("bias", &[d], 0.0), eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, T::lit(self.eps))
    }
}

/// Fails unless `v` has exactly `expected` as its shape.
pub fn expect_shape<T: Scalar>(g: &Graph<'_, T>, op: &'static str, v: Var, expected: &[usize]) -> Result<()> {
    if g.shape(v) != expected {
        return Err(TensorError::ShapeMismatch { op, expected: expected.to_vec(), got: g.shape(v).to_vec() });
    }
    Ok(())
}
