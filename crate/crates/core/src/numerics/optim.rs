//! AdamW with a polynomial learning-rate decay.
//!
//! Decoupled weight decay: the decay term scales the parameter directly and
//! is not folded into the moment estimates. The schedule multiplies the base
//! rate by (1 - t/T)^p, clamped at zero, where t is the 0-based step index at
//! update time; at t = T the effective rate is exactly zero and parameters
//! are left untouched.

use std::collections::BTreeMap;

use super::store::ParamStore;
use super::tensor::Tensor;
use super::{NumericsError, Result};

#[derive(Debug, Clone, Copy)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl PolySchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.base_lr * frac.max(0.0).powf(self.power)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: PolySchedule,
}

impl AdamWConfig {
    pub fn new(schedule: PolySchedule) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, schedule }
    }
}

/// Optimizer state: first/second moment per parameter name plus the step
/// counter. Moments are keyed and iterated in sorted-name order, so updates
/// are deterministic.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from per-name gradients. Parameters without a gradient
    /// entry are left untouched (that is how frozen subsystems stay frozen).
    /// Returns the effective learning rate that was used.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<f64> {
        let t = self.step;
        let lr = self.cfg.schedule.lr_at(t);
        let bias1 = 1.0 - self.cfg.beta1.powi(t as i32 + 1);
        let bias2 = 1.0 - self.cfg.beta2.powi(t as i32 + 1);

        for (name, grad) in grads {
            let current = params.get(name)?;
            if current.shape() != grad.shape() {
                return Err(NumericsError::ParamShape {
                    name: name.clone(),
                    got: grad.shape().to_vec(),
                    want: current.shape().to_vec(),
                });
            }
            let n = current.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

            let mut updated = current.clone();
            let p = updated.data_mut();
            let g = grad.data();
            for j in 0..n {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[j]);
            }
            params.set(name, updated)?;
        }
        self.step += 1;
        Ok(lr)
    }
}
