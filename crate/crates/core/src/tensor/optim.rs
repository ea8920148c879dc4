use std::collections::BTreeMap;

use super::{ParamStore, Tensor};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Adam::new(lr, (0.9, 0.999), 1e-8, 0.0)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter of `store` from its gradient. Gradients are
    /// left in place.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            let g = p.gradient.data();
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                let decay = self.lr * self.weight_decay * w[i];
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + decay;
            }
        }
    }
}
