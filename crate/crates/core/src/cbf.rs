//! Discrete-time control barrier function for a circular keep-out disk.
//!
//! `h(s) = ‖ee(s) − center‖ − radius` is positive outside the disk, zero on
//! its boundary and negative inside. A transition satisfies the barrier
//! condition when `h(s') − h(s) ≥ −λ·h(s)`.

use crate::env::{EnvConfig, State};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Circular unsafe region in end-effector space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSetSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Default for SafeSetSpec {
    fn default() -> Self {
        Self { center: [0.5, 0.5], radius: 0.25 }
    }
}

impl SafeSetSpec {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("cbf.radius must be positive, got {}", self.radius)));
        }
        if self.center[0].hypot(self.center[1]) + self.radius >= env.reach() {
            return Err(Error::Config("unsafe disk must lie strictly inside the workspace".into()));
        }
        Ok(())
    }
}

/// Linear class-K coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    pub lambda: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        Self { lambda: 0.99 }
    }
}

impl CbfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("cbf.lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Barrier value at an end-effector position.
pub fn barrier_at(ee: [f64; 2], safe: &SafeSetSpec) -> f64 {
    (ee[0] - safe.center[0]).hypot(ee[1] - safe.center[1]) - safe.radius
}

pub fn h(s: &State, safe: &SafeSetSpec, cfg: &EnvConfig) -> f64 {
    barrier_at(s.end_effector(cfg), safe)
}

pub fn cbf_satisfied(h_t: f64, h_next: f64, p: &CbfParams) -> bool {
    h_next - h_t >= -p.lambda * h_t
}

/// 0 when the transition satisfies the barrier condition, 1 otherwise.
pub fn label(s: &State, s_next: &State, safe: &SafeSetSpec, p: &CbfParams, cfg: &EnvConfig) -> u8 {
    u8::from(!cbf_satisfied(h(s, safe, cfg), h(s_next, safe, cfg), p))
}

/// Checks `h_t ≥ (1−λ)^t · h_0` for every `t`, with `1e-9` slack.
pub fn verify_forward_invariance(series: &[f64], p: &CbfParams) -> bool {
    let Some(&h0) = series.first() else {
        return false;
    };
    let decay = 1.0 - p.lambda;
    let mut bound = h0;
    for (t, &ht) in series.iter().enumerate() {
        if t > 0 {
            bound *= decay;
        }
        if ht < bound - 1e-9 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::JointState;

    #[test]
    fn barrier_reference_values() {
        let safe = SafeSetSpec::default();
        assert_eq!(barrier_at([0.5, 0.5], &safe), -0.25);
        assert!(barrier_at([0.75, 0.5], &safe).abs() < 1e-15);
        assert!((barrier_at([1.0, 0.0], &safe) - (0.5f64.sqrt() - 0.25)).abs() < 1e-12);
        let s = State::encode(&JointState::new(0.0, 0.0, 0.0, 0.0), [0.0, 0.0]);
        assert!((h(&s, &safe, &EnvConfig::default()) - 0.457_106_781_186_547_5).abs() < 1e-12);
    }

    #[test]
    fn condition_reference_values() {
        let p = CbfParams::default();
        assert!(cbf_satisfied(1.0, 0.5, &p));
        assert!(!cbf_satisfied(1.0, -0.1, &p));
        let lyap = CbfParams { lambda: 0.0 };
        assert!(cbf_satisfied(0.3, 0.3, &lyap));
        assert!(!cbf_satisfied(0.3, 0.299, &lyap));
        // equality is safe
        assert!(cbf_satisfied(1.0, 0.5, &CbfParams { lambda: 0.5 }));
    }

    #[test]
    fn invariance_reference_series() {
        let p = CbfParams::default();
        assert!(verify_forward_invariance(&[1.0; 10], &p));
        assert!(!verify_forward_invariance(&[1.0, 0.0049], &p));
        assert!(verify_forward_invariance(&[1.0, 0.0101], &p));
        assert!(!verify_forward_invariance(&[], &p));
    }

    #[test]
    fn unchanged_state_is_safe() {
        let safe = SafeSetSpec::default();
        let cfg = EnvConfig::default();
        let s = State::encode(&JointState::new(0.1, 0.2, 0.0, 0.0), [0.3, 0.3]);
        for lambda in [0.0, 0.5, 1.0] {
            assert_eq!(label(&s, &s, &safe, &CbfParams { lambda }, &cfg), 0);
        }
    }

    #[test]
    fn disk_outside_workspace_is_rejected() {
        let safe = SafeSetSpec { center: [0.9, 0.0], radius: 0.2 };
        assert!(safe.validate(&EnvConfig::default()).is_err());
        assert!(SafeSetSpec::default().validate(&EnvConfig::default()).is_ok());
        assert!(CbfParams { lambda: 1.5 }.validate().is_err());
    }
}
