//! DDPM noise schedule, forward corruption and reverse-step mathematics.
//!
//! Arrays are indexed by diffusion step `k = 0..=K`, with index 0 the
//! clean signal (`ᾱ_0 = 1`, `β_0 = 0`).

use crate::config::{DiffusionConfig, PredictionMode};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSchedule {
    pub k: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ(k) = f(k)/f(0)`, `f(k) = cos²(((k/K)+s)/(1+s)·π/2)`,
    /// betas from consecutive ratios clipped at `beta_clip`, then `ᾱ`
    /// recomputed as the running product so the two always agree.
    pub fn cosine(k: usize, s: f64, beta_clip: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("diffusion step count K must be at least 1".into()));
        }
        let f = |i: usize| (((i as f64 / k as f64) + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
        let f0 = f(0);
        let raw: Vec<f64> = (0..=k).map(|i| f(i) / f0).collect();
        let mut beta = vec![0.0; k + 1];
        let mut alpha = vec![1.0; k + 1];
        let mut alpha_bar = vec![1.0; k + 1];
        let mut posterior_var = vec![0.0; k + 1];
        for i in 1..=k {
            beta[i] = (1.0 - raw[i] / raw[i - 1]).min(beta_clip);
            alpha[i] = 1.0 - beta[i];
            alpha_bar[i] = alpha_bar[i - 1] * alpha[i];
            posterior_var[i] = beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]);
        }
        Ok(Self { k, beta, alpha, alpha_bar, posterior_var })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::cosine(cfg.k, cfg.cosine_s, cfg.beta_clip)
    }

    /// `√ᾱ_k·x0 + √(1−ᾱ_k)·noise`.
    pub fn q_sample(&self, x0: &[f64], k: usize, noise: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != noise.len() {
            return Err(Error::Invalid(format!("q_sample shape mismatch: {} vs {}", x0.len(), noise.len())));
        }
        let (a, b) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }

    /// Noise implied by a clean-signal estimate.
    pub fn eps_from_x0(&self, xk: &[f64], x0: &[f64], k: usize) -> Vec<f64> {
        let (a, b) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        xk.iter().zip(x0).map(|(x, s)| (x - a * s) / b).collect()
    }

    pub fn x0_from_eps(&self, xk: &[f64], eps: &[f64], k: usize) -> Vec<f64> {
        let (a, b) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        xk.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect()
    }

    /// Mean of `p(x^{k−1} | x^k)` given the network prediction.
    pub fn posterior_mean(&self, xk: &[f64], prediction: &[f64], k: usize, mode: PredictionMode) -> Vec<f64> {
        match mode {
            PredictionMode::Epsilon => {
                let c = (1.0 - self.alpha[k]) / (1.0 - self.alpha_bar[k]).sqrt();
                let inv = 1.0 / self.alpha[k].sqrt();
                xk.iter().zip(prediction).map(|(x, e)| inv * (x - c * e)).collect()
            }
            PredictionMode::Signal => {
                let denom = 1.0 - self.alpha_bar[k];
                let c0 = self.beta[k] * self.alpha_bar[k - 1].sqrt() / denom;
                let ck = (1.0 - self.alpha_bar[k - 1]) * self.alpha[k].sqrt() / denom;
                xk.iter().zip(prediction).map(|(x, s)| c0 * s + ck * x).collect()
            }
        }
    }

    /// Draws `N(mu + shift, posterior_var[k]·I)`. No noise is drawn when the
    /// variance is zero, which is always the case at `k = 1`.
    pub fn reverse_step<R: Rng + ?Sized>(&self, mu: &[f64], k: usize, shift: Option<&[f64]>, rng: &mut R) -> Vec<f64> {
        let sd = self.posterior_var[k].sqrt();
        let mut out = mu.to_vec();
        if let Some(sh) = shift {
            out.iter_mut().zip(sh).for_each(|(o, s)| *o += s);
        }
        if sd > 0.0 {
            for o in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *o += sd * z;
            }
        }
        out
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
