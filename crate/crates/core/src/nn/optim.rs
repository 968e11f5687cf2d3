use alloc::vec::Vec;

use super::graph::{BnUpdate, Gradients};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::math;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (id, grad) in grads.iter() {
            let entry = &mut store.entries_mut()[id.index()];
            if !entry.trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape()))
            });
            let decay = 1.0 - self.lr * self.weight_decay;
            let params = entry.value.data_mut();
            for (((p, &gr), mi), vi) in
                params.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p * decay - self.lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// Folds batch statistics from a training pass into running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
