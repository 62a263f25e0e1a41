//! AdamW with decoupled weight decay.
//!
//! ```text
//! m = β₁·m + (1-β₁)·g
//! v = β₂·v + (1-β₂)·g²
//! p = p - lr·(m/(1-β₁ᵗ)) / (√(v/(1-β₂ᵗ)) + eps) - lr·wd·p
//! ```

use crate::{NnError, ParamStore, Real, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `params`.
    ///
    /// Every gradient is checked before anything is modified, so a
    /// non-finite gradient leaves both parameters and moments untouched.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for p in params.iter() {
            if !p.grad.iter().all(|g| g.is_finite()) {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i].f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.value[i].f64();
                let upd = w - c.lr * mhat / (vhat.sqrt() + c.eps) - c.lr * c.weight_decay * w;
                p.value[i] = T::of(upd);
            }
        }
        Ok(())
    }
}
