//! Guided sampling, inpainting, guide arithmetic, selection and actions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdp_core::cbf::SafeSetSpec;
use sdp_core::config::{Backbone, GradPoint, GuideMode, ModelConfig, PredictionMode};
use sdp_core::dataset::Normalizer;
use sdp_core::diffusion::{standard_normal, NoiseSchedule};
use sdp_core::env::{EnvConfig, JointState, State, STATE_DIM, TRANSITION_DIM};
use sdp_core::models::{ModelKind, Network};
use sdp_core::planner::{select_plan, Denoiser, GuideConfig, LinearGuide, PlanDiagnostics, Planner};
use sdp_core::{seed, Error, Result};

const H: usize = 4;
const ROW: usize = H * TRANSITION_DIM;

/// Signal-mode predictor whose posterior mean is exactly the identity map.
struct IdentityMean<'a> {
    schedule: &'a NoiseSchedule,
}

impl Denoiser for IdentityMean<'_> {
    fn horizon(&self) -> usize {
        H
    }

    fn predict(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
        let s = self.schedule;
        let mut out = Vec::with_capacity(x.len());
        for (xi, &k) in x.chunks(ROW).zip(ks) {
            let denom = 1.0 - s.alpha_bar[k];
            let c0 = s.beta[k] * s.alpha_bar[k - 1].sqrt() / denom;
            let ck = (1.0 - s.alpha_bar[k - 1]) * s.alpha[k].sqrt() / denom;
            out.extend(xi.iter().map(|v| (1.0 - ck) / c0 * v));
        }
        Ok(out)
    }
}

/// Shrinks towards zero and poisons plans whose first action entry is huge.
struct Shrink;

impl Denoiser for Shrink {
    fn horizon(&self) -> usize {
        H
    }

    fn predict(&self, x: &[f64], _ks: &[usize]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| 0.7 * v).collect())
    }
}

struct Poison {
    bad: Vec<usize>,
}

impl Denoiser for Poison {
    fn horizon(&self) -> usize {
        H
    }

    fn predict(&self, x: &[f64], _ks: &[usize]) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        for &b in &self.bad {
            out[b * ROW + STATE_DIM] = f64::NAN;
        }
        Ok(out)
    }
}

fn normalizer() -> Normalizer {
    let mut min = vec![-1.0; TRANSITION_DIM];
    let mut max = vec![1.0; TRANSITION_DIM];
    for d in [4, 5] {
        min[d] = -8.0;
        max[d] = 8.0;
    }
    Normalizer { min, max }
}

fn s0() -> State {
    State::encode(&JointState::new(0.4, -1.1, 0.3, -0.2), [0.2, -0.6])
}

fn planner<'a>(
    denoiser: &'a dyn Denoiser,
    value: Option<&'a dyn sdp_core::planner::Guide>,
    safety: Option<&'a dyn sdp_core::planner::Guide>,
    schedule: &'a NoiseSchedule,
    norm: &'a Normalizer,
    guide: GuideConfig,
    batch: usize,
) -> Planner<'a> {
    Planner {
        denoiser,
        value,
        safety,
        schedule,
        mode: PredictionMode::Signal,
        normalizer: norm,
        guide,
        batch,
        env: EnvConfig::default(),
        safe: SafeSetSpec::default(),
    }
}

fn guide(mode: GuideMode, eta1: f64, eta2: f64) -> GuideConfig {
    GuideConfig { eta1, eta2, mode, grad_point: GradPoint::Mean }
}

fn small_arch() -> ModelConfig {
    ModelConfig { backbone: Backbone::Conv, blocks: 3, channels: 4, kernel: 3, embed_dim: 8, hidden: 16 }
}

#[test]
fn unguided_batch_of_one_matches_plain_reverse_sampling() {
    let sched = NoiseSchedule::cosine(20, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let p = planner(&Shrink, None, None, &sched, &norm, GuideConfig::unguided(), 1);
    let got = p.sample_plans(&s0(), 77).unwrap();

    let cond = norm.normalize_state(&s0());
    let mut rng = seed::rng(77, &[0]);
    let mut x = standard_normal(&mut rng, ROW);
    x[..STATE_DIM].copy_from_slice(&cond);
    for k in (1..=20).rev() {
        let pred: Vec<f64> = x.iter().map(|v| 0.7 * v).collect();
        let mut mu = sched.posterior_mean(&x, &pred, k, PredictionMode::Signal);
        mu[..STATE_DIM].copy_from_slice(&cond);
        x = sched.reverse_step(&mu, k, None, &mut rng);
        x[..STATE_DIM].copy_from_slice(&cond);
    }
    assert_eq!(got.plans, x);
}

#[test]
fn zero_scales_reproduce_unguided_sampling() {
    let sched = NoiseSchedule::cosine(10, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let den = Network::<f32>::new(ModelKind::Dynamics, small_arch(), H, &mut r);
    let val = Network::<f32>::new(ModelKind::Value, small_arch(), H, &mut r);
    let saf = Network::<f32>::new(ModelKind::Safety, small_arch(), H, &mut r);
    let base = planner(&den, Some(&val), Some(&saf), &sched, &norm, GuideConfig::unguided(), 3)
        .sample_plans(&s0(), 5)
        .unwrap();
    for mode in [GuideMode::Value, GuideMode::Safety, GuideMode::Combined] {
        let p = planner(&den, Some(&val), Some(&saf), &sched, &norm, guide(mode, 0.0, 0.0), 3);
        assert_eq!(p.sample_plans(&s0(), 5).unwrap().plans, base.plans, "{mode:?}");
    }
    let guided = planner(&den, Some(&val), Some(&saf), &sched, &norm, guide(GuideMode::Combined, 0.5, 5.0), 3)
        .sample_plans(&s0(), 5)
        .unwrap();
    assert_ne!(guided.plans, base.plans);
}

#[test]
fn first_state_is_pinned_at_every_step() {
    let sched = NoiseSchedule::cosine(15, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: vec![1.0; ROW] };
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, 0.3, 0.0), 6);
    let cond = norm.normalize_state(&s0());
    let mut steps = 0;
    let out = p
        .sample_with(&s0(), 11, 6, &mut |_, x| {
            steps += 1;
            for plan in x.chunks(ROW) {
                assert_eq!(&plan[..STATE_DIM], &cond);
            }
        })
        .unwrap();
    assert_eq!(steps, 15);
    for i in 0..out.len() {
        assert_eq!(&out.plan(i)[..STATE_DIM], &cond);
    }
}

#[test]
fn linear_guide_shifts_the_mean_by_the_accumulated_variance() {
    let sched = NoiseSchedule::cosine(20, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let den = IdentityMean { schedule: &sched };
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let g: Vec<f64> = (0..ROW).map(|_| r.random_range(-1.0..1.0)).collect();
    let lin = LinearGuide { coeffs: g.clone() };
    let eta = 0.2;
    let n = 1000;
    let base = planner(&den, None, None, &sched, &norm, GuideConfig::unguided(), n).sample_plans(&s0(), 9).unwrap();
    let guided =
        planner(&den, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, eta, 0.0), n).sample_plans(&s0(), 9).unwrap();
    let total_var: f64 = (1..=20).map(|k| sched.posterior_var[k]).sum();
    let unpaired =
        planner(&den, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, eta, 0.0), n).sample_plans(&s0(), 10).unwrap();
    for j in STATE_DIM..ROW {
        let mean = |b: &[f64]| b.chunks(ROW).map(|p| p[j]).sum::<f64>() / n as f64;
        let expected = eta * total_var * g[j];
        assert!((mean(&guided.plans) - mean(&base.plans) - expected).abs() < 1e-9);
        // independent streams: compare with Monte-Carlo error of two sample means
        let sd = (2.0 * (1.0 + total_var) / n as f64).sqrt();
        assert!((mean(&unpaired.plans) - mean(&base.plans) - expected).abs() < 5.0 * sd);
    }
}

#[test]
fn gradient_point_choice_does_not_matter_for_linear_guides() {
    let sched = NoiseSchedule::cosine(8, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: (0..ROW).map(|i| (i as f64 * 0.3).sin()).collect() };
    let mut a = guide(GuideMode::Value, 0.7, 0.0);
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, a, 4).sample_plans(&s0(), 1).unwrap();
    a.grad_point = GradPoint::Sample;
    let q = planner(&Shrink, Some(&lin), None, &sched, &norm, a, 4).sample_plans(&s0(), 1).unwrap();
    assert_eq!(p.plans, q.plans);
}

#[test]
fn combined_shift_is_the_sum_of_single_shifts() {
    let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let den = Network::<f32>::new(ModelKind::Dynamics, small_arch(), H, &mut r);
    let val = Network::<f32>::new(ModelKind::Value, small_arch(), H, &mut r);
    let saf = Network::<f32>::new(ModelKind::Safety, small_arch(), H, &mut r);
    let point: Vec<f64> = (0..3 * ROW).map(|_| r.random_range(-1.0..1.0)).collect();
    for k in [2, 10, 50] {
        let shift = |mode| {
            planner(&den, Some(&val), Some(&saf), &sched, &norm, guide(mode, 0.01, 5.0), 3)
                .guide_shift(&point, k)
                .unwrap()
                .total()
                .unwrap()
        };
        let (v, s, c) = (shift(GuideMode::Value), shift(GuideMode::Safety), shift(GuideMode::Combined));
        for i in 0..c.len() {
            assert!((c[i] - v[i] - s[i]).abs() <= 1e-12 * (1.0 + c[i].abs()));
        }
    }
    let p = planner(&den, Some(&val), Some(&saf), &sched, &norm, guide(GuideMode::Combined, 0.01, 5.0), 3);
    let at_one = p.guide_shift(&point, 1).unwrap();
    assert!(at_one.total().is_none());
}

#[test]
fn missing_guides_are_configuration_errors() {
    let sched = NoiseSchedule::cosine(5, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: vec![0.0; ROW] };
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, guide(GuideMode::Combined, 0.1, 0.1), 2);
    assert!(matches!(p.sample_plans(&s0(), 0), Err(Error::Config(_))));
    let p = planner(&Shrink, None, Some(&lin), &sched, &norm, guide(GuideMode::Value, 0.1, 0.1), 2);
    assert!(matches!(p.check(), Err(Error::Config(_))));
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, -0.1, 0.0), 2);
    assert!(matches!(p.check(), Err(Error::Config(_))));
}

#[test]
fn non_finite_plans_are_excluded_from_selection() {
    let sched = NoiseSchedule::cosine(5, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: vec![0.1; ROW] };
    let den = Poison { bad: vec![0, 2] };
    let p = planner(&den, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, 0.0, 0.0), 4);
    let batch = p.sample_plans(&s0(), 3).unwrap();
    let failed: Vec<bool> = batch.diagnostics.iter().map(|d| d.failed).collect();
    assert_eq!(failed, vec![true, false, true, false]);
    assert!([1, 3].contains(&select_plan(&batch.diagnostics).unwrap()));

    let den = Poison { bad: vec![0, 1] };
    let p = planner(&den, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, 0.0, 0.0), 2);
    let batch = p.sample_plans(&s0(), 3).unwrap();
    assert!(matches!(select_plan(&batch.diagnostics), Err(Error::AllPlansFailed)));
}

#[test]
fn diagnostics_use_ground_truth_barrier() {
    let sched = NoiseSchedule::cosine(10, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: vec![0.05; ROW] };
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, 0.0, 0.0), 8);
    let batch = p.sample_plans(&s0(), 21).unwrap();
    let env = EnvConfig::default();
    let safe = SafeSetSpec::default();
    for (i, d) in batch.diagnostics.iter().enumerate() {
        assert_eq!(d.h.len(), H);
        for (t, row) in batch.plan(i).chunks(TRANSITION_DIM).enumerate() {
            let (s, _) = norm.denormalize_row(row);
            let ee = s.end_effector(&env);
            let oracle = (ee[0] - safe.center[0]).hypot(ee[1] - safe.center[1]) - safe.radius;
            assert!((d.h[t] - oracle).abs() < 1e-12);
        }
        assert_eq!(d.violations, d.h.iter().filter(|&&v| v <= 0.0).count());
        let v: f64 = batch.plan(i).iter().sum::<f64>() * 0.05;
        assert!((d.value.unwrap() - v).abs() < 1e-9);
    }
}

#[test]
fn selection_is_a_pure_function_of_logged_diagnostics() {
    let sched = NoiseSchedule::cosine(10, 0.008, 0.999).unwrap();
    let norm = normalizer();
    let lin = LinearGuide { coeffs: (0..ROW).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect() };
    let p = planner(&Shrink, Some(&lin), None, &sched, &norm, guide(GuideMode::Value, 0.1, 0.0), 16);
    for seed_ in 0..5 {
        let batch = p.sample_plans(&s0(), seed_).unwrap();
        let chosen = select_plan(&batch.diagnostics).unwrap();
        let logged = serde_json::to_string(&batch.diagnostics).unwrap();
        let replay: Vec<PlanDiagnostics> = serde_json::from_str(&logged).unwrap();
        assert_eq!(select_plan(&replay).unwrap(), chosen);
        let again = p.sample_plans(&s0(), seed_).unwrap();
        assert_eq!(again.plans, batch.plans);
        let d = &batch.diagnostics;
        let free: Vec<usize> = (0..d.len()).filter(|&i| d[i].violations == 0).collect();
        if !free.is_empty() {
            assert!(free.contains(&chosen));
            assert!(free.iter().all(|&i| d[i].value <= d[chosen].value));
        }
    }
}

#[test]
fn selection_worked_examples() {
    let d = |v: f64, n: usize| PlanDiagnostics { value: Some(v), violations: n, failed: false, h: vec![], safe_prob: None };
    assert_eq!(select_plan(&[d(9.0, 1), d(-5.0, 0), d(10.0, 3)]).unwrap(), 1);
    assert_eq!(select_plan(&[d(1.0, 0), d(3.0, 0)]).unwrap(), 1);
    assert_eq!(select_plan(&[d(-9.0, 5), d(-4.0, 2), d(-7.0, 2)]).unwrap(), 1);
    assert_eq!(select_plan(&[d(2.0, 2), d(2.0, 2)]).unwrap(), 0);
    assert!(matches!(select_plan(&[]), Err(Error::AllPlansFailed)));
}

proptest! {
    #[test]
    fn applied_actions_are_legal(row in prop::collection::vec(-6.0f64..6.0, TRANSITION_DIM)) {
        let sched = NoiseSchedule::cosine(2, 0.008, 0.999).unwrap();
        let norm = normalizer();
        let p = planner(&Shrink, None, None, &sched, &norm, GuideConfig::unguided(), 1);
        let mut plan = row.clone();
        plan.extend(std::iter::repeat_n(0.0, ROW - TRANSITION_DIM));
        let a = p.first_action(&plan);
        prop_assert!(a.torque1.abs() <= 1.0 && a.torque2.abs() <= 1.0);
        let raw = norm.denormalize(STATE_DIM, row[STATE_DIM]);
        prop_assert_eq!(a.torque1, raw.clamp(-1.0, 1.0));
    }
}
