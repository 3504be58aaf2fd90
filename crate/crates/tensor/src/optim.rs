use std::f64::consts::PI;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::{Scalar, Tensor};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(num_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![None; num_params], v: vec![None; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step_size = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        for (id, g) in grads.params() {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            p.expect_same_shape("adam", g)?;
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// First/second moment tensors for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> {
        self.m.iter().zip(&self.v).enumerate().filter_map(|(i, (m, v))| match (m, v) {
            (Some(m), Some(v)) => Some((ParamId(i), m, v)),
            _ => None,
        })
    }

    pub fn restore(&mut self, step: u64, id: ParamId, m: Tensor<T>, v: Tensor<T>) {
        self.step = step;
        self.m[id.index()] = Some(m);
        self.v[id.index()] = Some(v);
    }

    pub fn set_steps(&mut self, step: u64) {
        self.step = step;
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total_steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineAnnealing {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineAnnealing {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_max;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t).cos())
    }
}
