//! Guided conditional sampling of plan batches, plan selection and the
//! receding-horizon control loop.
//!
//! One reverse step for a plan `τ^k`:
//!
//! ```text
//! μ      = posterior mean from the denoiser's prediction, first state pinned
//! shift  = Σ_k (η₁ ∇V + η₂ ∇ Σ_t log p(safe_t))      (active guides only)
//! τ^{k−1} ~ N(μ + shift, Σ_k),  first state pinned again
//! ```
//!
//! Random streams: plan `i` of a batch draws from its own generator seeded
//! with `derive(seed, [i])`. It first draws `H·10` standard normals for
//! `τ^K`, then one block of `H·10` normals per reverse step with nonzero
//! variance, in decreasing `k`.

use crate::cbf::{barrier_at, SafeSetSpec};
use crate::config::{GradPoint, GuideMode, PlanConfig, PredictionMode};
use crate::dataset::Normalizer;
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::env::{Action, EnvConfig, Policy, State, STATE_DIM, TRANSITION_DIM};
use crate::models::{ModelKind, Network};
use crate::{seed, Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Guide scales and which guides are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub mode: GuideMode,
    pub grad_point: GradPoint,
}

impl GuideConfig {
    pub fn from_plan(p: &PlanConfig) -> Self {
        Self { eta1: p.eta1, eta2: p.eta2, mode: p.mode, grad_point: p.grad_point }
    }

    pub fn unguided() -> Self {
        Self { eta1: 0.0, eta2: 0.0, mode: GuideMode::None, grad_point: GradPoint::Mean }
    }

    fn value_active(&self) -> bool {
        self.mode.uses_value() && self.eta1 != 0.0
    }

    fn safety_active(&self) -> bool {
        self.mode.uses_safety() && self.eta2 != 0.0
    }
}

/// Trajectory denoiser over flattened `[B, H, 10]` batches.
pub trait Denoiser: Sync {
    fn horizon(&self) -> usize;
    fn predict(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>>;
}

/// Differentiable scalar-per-sample guide objective.
pub trait Guide: Sync {
    fn objective(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>>;
    fn objective_and_grad(&self, x: &[f64], ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)>;
    /// Per-step probability of the safe class, when the guide is a classifier.
    fn safe_probabilities(&self, _x: &[f64], _ks: &[usize]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

impl Denoiser for Network<f32> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
        Network::predict(self, x, ks)
    }
}

impl Guide for Network<f32> {
    fn objective(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
        self.guide_value(x, ks)
    }

    fn objective_and_grad(&self, x: &[f64], ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.guide_value_and_grad(x, ks)
    }

    fn safe_probabilities(&self, x: &[f64], ks: &[usize]) -> Result<Option<Vec<f64>>> {
        if self.kind != ModelKind::Safety {
            return Ok(None);
        }
        let logits = self.predict(x, ks)?;
        Ok(Some(
            logits
                .chunks(2)
                .map(|p| {
                    let m = p[0].max(p[1]);
                    let (a, b) = ((p[0] - m).exp(), (p[1] - m).exp());
                    a / (a + b)
                })
                .collect(),
        ))
    }
}

/// `V(τ) = Σ c·τ` per sample; its gradient is `c` everywhere.
#[derive(Debug, Clone)]
pub struct LinearGuide {
    pub coeffs: Vec<f64>,
}

impl Guide for LinearGuide {
    fn objective(&self, x: &[f64], _ks: &[usize]) -> Result<Vec<f64>> {
        Ok(x.chunks(self.coeffs.len()).map(|row| row.iter().zip(&self.coeffs).map(|(a, c)| a * c).sum()).collect())
    }

    fn objective_and_grad(&self, x: &[f64], ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let grad = self.coeffs.iter().cycle().take(x.len()).copied().collect();
        Ok((self.objective(x, ks)?, grad))
    }
}

/// Per-plan diagnostics used for selection and logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub value: Option<f64>,
    /// Steps whose decoded state has `h ≤ 0`.
    pub violations: usize,
    pub failed: bool,
    pub h: Vec<f64>,
    pub safe_prob: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PlanBatch {
    pub horizon: usize,
    /// Normalized plans, `[B, H, 10]` row-major.
    pub plans: Vec<f64>,
    pub diagnostics: Vec<PlanDiagnostics>,
}

impl PlanBatch {
    pub fn len(&self) -> usize {
        self.diagnostics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn plan(&self, i: usize) -> &[f64] {
        let n = self.horizon * TRANSITION_DIM;
        &self.plans[i * n..(i + 1) * n]
    }
}

/// Shift contributions of one reverse step, kept apart for inspection.
#[derive(Debug, Clone, Default)]
pub struct GuideShift {
    pub value: Option<Vec<f64>>,
    pub safety: Option<Vec<f64>>,
}

impl GuideShift {
    pub fn total(&self) -> Option<Vec<f64>> {
        match (&self.value, &self.safety) {
            (None, None) => None,
            (Some(v), None) => Some(v.clone()),
            (None, Some(s)) => Some(s.clone()),
            (Some(v), Some(s)) => Some(v.iter().zip(s).map(|(a, b)| a + b).collect()),
        }
    }
}

/// Frozen models plus everything needed to turn samples into actions.
pub struct Planner<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub value: Option<&'a dyn Guide>,
    pub safety: Option<&'a dyn Guide>,
    pub schedule: &'a NoiseSchedule,
    pub mode: PredictionMode,
    pub normalizer: &'a Normalizer,
    pub guide: GuideConfig,
    pub batch: usize,
    pub env: EnvConfig,
    pub safe: SafeSetSpec,
}

fn pin(x: &mut [f64], cond: &[f64; STATE_DIM], row: usize) {
    for plan in x.chunks_mut(row) {
        plan[..STATE_DIM].copy_from_slice(cond);
    }
}

impl Planner<'_> {
    pub fn check(&self) -> Result<()> {
        if self.guide.mode.uses_value() && self.value.is_none() {
            return Err(Error::Config(format!("plan mode `{}` needs the value model", self.guide.mode)));
        }
        if self.guide.mode.uses_safety() && self.safety.is_none() {
            return Err(Error::Config(format!("plan mode `{}` needs the safety model", self.guide.mode)));
        }
        if self.guide.eta1 < 0.0 || self.guide.eta2 < 0.0 {
            return Err(Error::Config("guide scales must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("plan batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.denoiser.horizon()
    }

    /// Guidance shift `Σ_k·η·∇f` at `point` for every active guide.
    pub fn guide_shift(&self, point: &[f64], k: usize) -> Result<GuideShift> {
        let b = point.len() / (self.horizon() * TRANSITION_DIM);
        let ks = vec![k; b];
        let var = self.schedule.posterior_var[k];
        let mut out = GuideShift::default();
        if var == 0.0 {
            return Ok(out);
        }
        if self.guide.value_active() {
            if let Some(v) = self.value {
                let (_, g) = v.objective_and_grad(point, &ks)?;
                let c = self.guide.eta1 * var;
                out.value = Some(g.iter().map(|x| c * x).collect());
            }
        }
        if self.guide.safety_active() {
            if let Some(s) = self.safety {
                let (_, g) = s.objective_and_grad(point, &ks)?;
                let c = self.guide.eta2 * var;
                out.safety = Some(g.iter().map(|x| c * x).collect());
            }
        }
        Ok(out)
    }

    /// Runs the full guided reverse chain for `batch` plans conditioned on
    /// `s0`. `on_step` sees the batch after every reverse step.
    pub fn sample_with(
        &self,
        s0: &State,
        seed_base: u64,
        batch: usize,
        on_step: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<PlanBatch> {
        self.check()?;
        let h = self.horizon();
        let row = h * TRANSITION_DIM;
        let cond = self.normalizer.normalize_state(s0);
        let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|i| seed::rng(seed_base, &[i as u64])).collect();
        let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| standard_normal(r, row)).collect();
        pin(&mut x, &cond, row);
        for k in (1..=self.schedule.k).rev() {
            let ks = vec![k; batch];
            let pred = self.denoiser.predict(&x, &ks)?;
            let mut mu = Vec::with_capacity(x.len());
            for (xi, pi) in x.chunks(row).zip(pred.chunks(row)) {
                mu.extend(self.schedule.posterior_mean(xi, pi, k, self.mode));
            }
            pin(&mut mu, &cond, row);
            let point = match self.guide.grad_point {
                GradPoint::Mean => &mu,
                GradPoint::Sample => &x,
            };
            let shift = self.guide_shift(point, k)?.total();
            let mut next = Vec::with_capacity(x.len());
            for (i, rng) in rngs.iter_mut().enumerate() {
                let sh = shift.as_ref().map(|s| &s[i * row..(i + 1) * row]);
                next.extend(self.schedule.reverse_step(&mu[i * row..(i + 1) * row], k, sh, rng));
            }
            pin(&mut next, &cond, row);
            x = next;
            on_step(k, &x);
        }
        let diagnostics = self.diagnose(&x)?;
        Ok(PlanBatch { horizon: h, plans: x, diagnostics })
    }

    pub fn sample_plans(&self, s0: &State, seed_base: u64) -> Result<PlanBatch> {
        self.sample_with(s0, seed_base, self.batch, &mut |_, _| {})
    }

    fn diagnose(&self, x: &[f64]) -> Result<Vec<PlanDiagnostics>> {
        let h = self.horizon();
        let row = h * TRANSITION_DIM;
        let b = x.len() / row;
        let ks = vec![1; b];
        let failed: Vec<bool> = x.chunks(row).map(|p| !p.iter().all(|v| v.is_finite())).collect();
        // keep failed plans from poisoning the guide evaluation of their neighbours
        let clean: Vec<f64> = x
            .chunks(row)
            .zip(&failed)
            .flat_map(|(p, &f)| if f { vec![0.0; row] } else { p.to_vec() })
            .collect();
        let values = match self.value {
            Some(v) => Some(v.objective(&clean, &ks)?),
            None => None,
        };
        let probs = match self.safety {
            Some(s) => s.safe_probabilities(&clean, &ks)?,
            None => None,
        };
        let mut out = Vec::with_capacity(b);
        for (i, plan) in x.chunks(row).enumerate() {
            let hs: Vec<f64> = plan
                .chunks(TRANSITION_DIM)
                .map(|r| {
                    let (s, _) = self.normalizer.denormalize_row(r);
                    barrier_at(s.end_effector(&self.env), &self.safe)
                })
                .collect();
            let value = values.as_ref().map(|v| v[i]).filter(|v| v.is_finite());
            out.push(PlanDiagnostics {
                value,
                violations: hs.iter().filter(|&&v| !(v > 0.0)).count(),
                failed: failed[i] || (values.is_some() && value.is_none()),
                h: hs,
                safe_prob: probs.as_ref().map(|p| p[i * h..(i + 1) * h].to_vec()),
            });
        }
        Ok(out)
    }

    /// Raw action from the first row of a plan, denormalized and clamped.
    pub fn first_action(&self, plan: &[f64]) -> Action {
        let (_, a) = self.normalizer.denormalize_row(&plan[..TRANSITION_DIM]);
        Action::new(a[0], a[1])
    }
}

/// Picks a plan: collision-free plans by highest value, otherwise fewest
/// violating steps, then highest value, then lowest index.
pub fn select_plan(diags: &[PlanDiagnostics]) -> Result<usize> {
    let key = |d: &PlanDiagnostics| d.value.unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<usize> = None;
    for (i, d) in diags.iter().enumerate() {
        if d.failed {
            continue;
        }
        let better = match best {
            None => true,
            Some(j) => {
                let b = &diags[j];
                let (free_i, free_j) = (d.violations == 0, b.violations == 0);
                if free_i != free_j {
                    free_i
                } else if !free_i && d.violations != b.violations {
                    d.violations < b.violations
                } else {
                    key(d) > key(b)
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best.ok_or(Error::AllPlansFailed)
}

/// Digest of one plan for the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDigest {
    pub value: Option<f64>,
    pub violations: usize,
    pub failed: bool,
}

/// What the planner decided at one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStepLog {
    pub t: usize,
    pub chosen: usize,
    pub action: [f64; 2],
    pub predicted_value: Option<f64>,
    pub plans: Vec<PlanDigest>,
}

/// Receding-horizon policy: replan from scratch at every step and apply the
/// first action of the selected plan.
pub struct RecedingHorizon<'a> {
    pub planner: Planner<'a>,
    pub seed: u64,
    pub log: Vec<PlanStepLog>,
    pub keep_last_batch: bool,
    pub last_batch: Option<PlanBatch>,
}

impl<'a> RecedingHorizon<'a> {
    pub fn new(planner: Planner<'a>, seed: u64) -> Self {
        Self { planner, seed, log: Vec::new(), keep_last_batch: false, last_batch: None }
    }
}

impl Policy for RecedingHorizon<'_> {
    fn act(&mut self, state: &State, t: usize) -> Result<Action> {
        let step_seed = seed::derive(self.seed, &[seed::tag::PLAN, t as u64]);
        let batch = self.planner.sample_plans(state, step_seed)?;
        let chosen = select_plan(&batch.diagnostics)?;
        let action = self.planner.first_action(batch.plan(chosen));
        self.log.push(PlanStepLog {
            t,
            chosen,
            action: action.to_array(),
            predicted_value: batch.diagnostics[chosen].value,
            plans: batch
                .diagnostics
                .iter()
                .map(|d| PlanDigest { value: d.value, violations: d.violations, failed: d.failed })
                .collect(),
        });
        if self.keep_last_batch {
            self.last_batch = Some(batch);
        }
        Ok(action)
    }

    fn take_annotations(&mut self) -> Vec<serde_json::Value> {
        std::mem::take(&mut self.log)
            .into_iter()
            .map(|l| serde_json::to_value(l).expect("plan log is serializable"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(value: f64, violations: usize) -> PlanDiagnostics {
        PlanDiagnostics { value: Some(value), violations, failed: false, h: vec![], safe_prob: None }
    }

    #[test]
    fn selection_reference_cases() {
        assert_eq!(select_plan(&[diag(5.0, 2), diag(-1.0, 0), diag(9.0, 1)]).unwrap(), 1);
        assert_eq!(select_plan(&[diag(1.0, 0), diag(3.0, 0)]).unwrap(), 1);
        assert_eq!(select_plan(&[diag(-9.0, 5), diag(-4.0, 2), diag(-7.0, 2)]).unwrap(), 1);
        assert_eq!(select_plan(&[diag(2.0, 0), diag(2.0, 0)]).unwrap(), 0);
    }

    #[test]
    fn failed_plans_are_skipped() {
        let mut bad = diag(100.0, 0);
        bad.failed = true;
        assert_eq!(select_plan(&[bad.clone(), diag(-3.0, 4)]).unwrap(), 1);
        assert!(matches!(select_plan(&[bad]), Err(Error::AllPlansFailed)));
    }

    #[test]
    fn linear_guide_gradient_is_its_coefficients() {
        let g = LinearGuide { coeffs: vec![1.0, -2.0, 0.5] };
        let (v, grad) = g.objective_and_grad(&[1.0, 1.0, 2.0, 0.0, 1.0, 0.0], &[1, 1]).unwrap();
        assert_eq!(v, vec![0.0, -2.0]);
        assert_eq!(grad, vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }
}
