//! Adam with a cosine learning-rate schedule and no weight decay.

use std::f64::consts::PI;

use crate::param::Stateful;
use crate::tensor::to_storage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine decay from `lr` to zero.
    pub total_steps: usize,
}

impl AdamConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps }
    }

    /// Learning rate used by update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let t = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: usize,
    /// First and second moments, in parameter traversal order.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    /// Applies one update to every parameter holding a gradient; values are
    /// rounded to storage precision. Returns the learning rate used.
    pub fn update(&mut self, model: &mut impl Stateful) -> f64 {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let params = model.params_mut("");
        if self.moments.is_empty() {
            self.moments = params.iter().map(|(_, p)| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        for ((_, p), (m, v)) in params.into_iter().zip(&mut self.moments) {
            if p.grad.len() != p.len() {
                continue;
            }
            let grad = std::mem::take(&mut p.grad);
            for (i, g) in grad.iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                let val = &mut p.value.data_mut()[i];
                *val = to_storage(*val - upd);
            }
            p.grad = grad;
        }
        lr
    }
}
