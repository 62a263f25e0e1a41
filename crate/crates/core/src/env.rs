//! Planar two-link manipulator: dynamics, observation encoding, reward and
//! episode logic.
//!
//! The arm moves in the horizontal plane (no gravity) with point masses at
//! the link ends and viscous joint damping. One step is a semi-implicit
//! Euler update: accelerations from the current state, velocities first,
//! then angles from the new velocities.

use crate::cbf::{barrier_at, label, CbfParams, SafeSetSpec};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;
pub const TRANSITION_DIM: usize = STATE_DIM + ACTION_DIM;

const MAX_REJECTION_TRIES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub damping: f64,
    pub dt: f64,
    pub vel_clamp: f64,
    pub annulus_min: f64,
    pub annulus_max: f64,
    pub max_steps: usize,
    pub tolerance: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            l1: 0.5,
            l2: 0.5,
            m1: 1.0,
            m2: 1.0,
            damping: 0.1,
            dt: 0.05,
            vel_clamp: 8.0,
            annulus_min: 0.2,
            annulus_max: 1.0,
            max_steps: 100,
            tolerance: 0.3,
        }
    }
}

impl EnvConfig {
    pub fn reach(&self) -> f64 {
        self.l1 + self.l2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("env.l1", self.l1), ("env.l2", self.l2), ("env.m1", self.m1), ("env.m2", self.m2), ("env.dt", self.dt)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.damping < 0.0 || self.vel_clamp <= 0.0 || self.tolerance <= 0.0 {
            return Err(Error::Config("env.damping >= 0, env.vel_clamp > 0 and env.tolerance > 0 required".into()));
        }
        if !(0.0 <= self.annulus_min && self.annulus_min < self.annulus_max && self.annulus_max <= self.reach()) {
            return Err(Error::Config(format!(
                "target annulus [{}, {}] must satisfy 0 <= min < max <= l1+l2 = {}",
                self.annulus_min,
                self.annulus_max,
                self.reach()
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("env.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub alpha1: f64,
    pub alpha2: f64,
    pub dalpha1: f64,
    pub dalpha2: f64,
}

impl JointState {
    pub fn new(alpha1: f64, alpha2: f64, dalpha1: f64, dalpha2: f64) -> Self {
        Self { alpha1: wrap_angle(alpha1), alpha2: wrap_angle(alpha2), dalpha1, dalpha2 }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha1.is_finite() && self.alpha2.is_finite() && self.dalpha1.is_finite() && self.dalpha2.is_finite()
    }
}

/// Joint torques, clamped to [-1, 1] on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub torque1: f64,
    pub torque2: f64,
}

impl Action {
    pub const LIMIT: f64 = 1.0;

    pub fn new(torque1: f64, torque2: f64) -> Self {
        Self { torque1: torque1.clamp(-Self::LIMIT, Self::LIMIT), torque2: torque2.clamp(-Self::LIMIT, Self::LIMIT) }
    }

    pub fn zero() -> Self {
        Self { torque1: 0.0, torque2: 0.0 }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.torque1, self.torque2]
    }
}

/// Observation `(sin α1, cos α1, sin α2, cos α2, dα1, dα2, x_tg, y_tg)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State(pub [f64; STATE_DIM]);

impl State {
    pub fn encode(js: &JointState, target: [f64; 2]) -> Self {
        let (s1, c1) = js.alpha1.sin_cos();
        let (s2, c2) = js.alpha2.sin_cos();
        State([s1, c1, s2, c2, js.dalpha1, js.dalpha2, target[0], target[1]])
    }

    pub fn joint_state(&self) -> JointState {
        let o = &self.0;
        JointState::new(o[0].atan2(o[1]), o[2].atan2(o[3]), o[4], o[5])
    }

    pub fn target(&self) -> [f64; 2] {
        [self.0[6], self.0[7]]
    }

    /// End-effector position computed from the sin/cos encoding. Components
    /// are renormalized per joint so decoded network outputs are handled too.
    pub fn end_effector(&self, cfg: &EnvConfig) -> [f64; 2] {
        let o = &self.0;
        let n1 = o[0].hypot(o[1]);
        let n2 = o[2].hypot(o[3]);
        let (s1, c1) = if n1 > 0.0 { (o[0] / n1, o[1] / n1) } else { (0.0, 1.0) };
        let (s2, c2) = if n2 > 0.0 { (o[2] / n2, o[3] / n2) } else { (0.0, 1.0) };
        let c12 = c1 * c2 - s1 * s2;
        let s12 = s1 * c2 + c1 * s2;
        [cfg.l1 * c1 + cfg.l2 * c12, cfg.l1 * s1 + cfg.l2 * s12]
    }

    /// Rounds every component through `f32`, the dataset storage precision.
    pub fn quantized(&self) -> Self {
        let mut o = self.0;
        o.iter_mut().for_each(|v| *v = *v as f32 as f64);
        State(o)
    }
}

pub fn forward_kinematics(js: &JointState, cfg: &EnvConfig) -> [f64; 2] {
    let a12 = js.alpha1 + js.alpha2;
    [cfg.l1 * js.alpha1.cos() + cfg.l2 * a12.cos(), cfg.l1 * js.alpha1.sin() + cfg.l2 * a12.sin()]
}

/// Joint-space inertia matrix for point masses at the link tips.
pub fn mass_matrix(alpha2: f64, cfg: &EnvConfig) -> [[f64; 2]; 2] {
    let c2 = alpha2.cos();
    let a = cfg.m2 * cfg.l1 * cfg.l2;
    let m22 = cfg.m2 * cfg.l2 * cfg.l2;
    let m11 = (cfg.m1 + cfg.m2) * cfg.l1 * cfg.l1 + m22 + 2.0 * a * c2;
    let m12 = m22 + a * c2;
    [[m11, m12], [m12, m22]]
}

pub fn kinetic_energy(js: &JointState, cfg: &EnvConfig) -> f64 {
    let m = mass_matrix(js.alpha2, cfg);
    let (v1, v2) = (js.dalpha1, js.dalpha2);
    0.5 * (m[0][0] * v1 * v1 + 2.0 * m[0][1] * v1 * v2 + m[1][1] * v2 * v2)
}

fn solve2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> [f64; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [(m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det, (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det]
}

/// One semi-implicit Euler step of `M(q)q̈ + C(q,q̇)q̇ + b·q̇ = τ`.
pub fn step(js: &JointState, a: Action, cfg: &EnvConfig) -> Result<JointState> {
    let a = Action::new(a.torque1, a.torque2);
    let (v1, v2) = (js.dalpha1, js.dalpha2);
    let h = cfg.m2 * cfg.l1 * cfg.l2 * js.alpha2.sin();
    let coriolis = [-h * (2.0 * v1 * v2 + v2 * v2), h * v1 * v1];
    let rhs = [a.torque1 - coriolis[0] - cfg.damping * v1, a.torque2 - coriolis[1] - cfg.damping * v2];
    let acc = solve2(mass_matrix(js.alpha2, cfg), rhs);
    let nv1 = (v1 + cfg.dt * acc[0]).clamp(-cfg.vel_clamp, cfg.vel_clamp);
    let nv2 = (v2 + cfg.dt * acc[1]).clamp(-cfg.vel_clamp, cfg.vel_clamp);
    let next = JointState::new(js.alpha1 + cfg.dt * nv1, js.alpha2 + cfg.dt * nv2, nv1, nv2);
    if !next.is_finite() || !acc[0].is_finite() || !acc[1].is_finite() {
        return Err(Error::NonFiniteState);
    }
    Ok(next)
}

/// Negative Euclidean distance from end-effector to target.
pub fn reward(s: &State, cfg: &EnvConfig) -> f64 {
    let ee = s.end_effector(cfg);
    let tg = s.target();
    -(ee[0] - tg[0]).hypot(ee[1] - tg[1])
}

pub fn distance_to_target(s: &State, cfg: &EnvConfig) -> f64 {
    -reward(s, cfg)
}

/// Where reset targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Uniform on the annulus, rejecting targets strictly inside the unsafe disk.
    Dataset,
    /// Uniform on the annulus, unsafe-disk targets allowed.
    Anywhere,
    /// Uniform within `factor · radius` of the unsafe-disk center, intersected
    /// with the annulus.
    NearUnsafe { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetOptions {
    pub target: TargetMode,
    /// Resample the initial configuration until `h(ee) >= margin`.
    pub safe_start_margin: Option<f64>,
}

impl ResetOptions {
    pub fn dataset() -> Self {
        Self { target: TargetMode::Dataset, safe_start_margin: None }
    }

    pub fn evaluation() -> Self {
        Self { target: TargetMode::Anywhere, safe_start_margin: None }
    }
}

fn sample_annulus<R: Rng + ?Sized>(rng: &mut R, cfg: &EnvConfig) -> [f64; 2] {
    let r2 = rng.random_range(cfg.annulus_min.powi(2)..cfg.annulus_max.powi(2));
    let th = rng.random_range(-PI..PI);
    let r = r2.sqrt();
    [r * th.cos(), r * th.sin()]
}

fn in_annulus(p: [f64; 2], cfg: &EnvConfig) -> bool {
    let r = p[0].hypot(p[1]);
    r >= cfg.annulus_min && r <= cfg.annulus_max
}

/// Samples an initial joint state and a target.
pub fn reset<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &EnvConfig,
    safe: &SafeSetSpec,
    opts: &ResetOptions,
) -> Result<(JointState, [f64; 2])> {
    cfg.validate()?;
    let cnorm = safe.center[0].hypot(safe.center[1]);
    let annulus_inside_disk = cnorm + cfg.annulus_max <= safe.radius;
    let target = match opts.target {
        TargetMode::Anywhere => sample_annulus(rng, cfg),
        TargetMode::Dataset => {
            if annulus_inside_disk {
                return Err(Error::Config("target annulus lies entirely inside the unsafe region".into()));
            }
            let mut found = None;
            for _ in 0..MAX_REJECTION_TRIES {
                let p = sample_annulus(rng, cfg);
                if barrier_at(p, safe) >= 0.0 {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| Error::Config("could not sample a target outside the unsafe region".into()))?
        }
        TargetMode::NearUnsafe { factor } => {
            let rad = factor * safe.radius;
            let mut found = None;
            for _ in 0..MAX_REJECTION_TRIES {
                let r = rad * rng.random::<f64>().sqrt();
                let th = rng.random_range(-PI..PI);
                let p = [safe.center[0] + r * th.cos(), safe.center[1] + r * th.sin()];
                if in_annulus(p, cfg) {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| Error::Config("unsafe-region neighbourhood does not meet the target annulus".into()))?
        }
    };
    let mut tries = 0;
    loop {
        let js = JointState::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        match opts.safe_start_margin {
            Some(m) if barrier_at(forward_kinematics(&js, cfg), safe) < m => {
                tries += 1;
                if tries >= MAX_REJECTION_TRIES {
                    return Err(Error::Config("could not sample a safe initial configuration".into()));
                }
            }
            _ => return Ok((js, target)),
        }
    }
}

/// One `(s, a, s', r, d, c)` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: State,
    pub a: Action,
    pub s_next: State,
    pub r: f64,
    pub d: bool,
    pub c: u8,
}

/// Maps observations to torques.
pub trait Policy {
    fn act(&mut self, state: &State, step: usize) -> Result<Action>;

    /// Per-step annotations recorded since the last call, in step order.
    fn take_annotations(&mut self) -> Vec<serde_json::Value> {
        Vec::new()
    }
}

pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, _: &State, _: usize) -> Result<Action> {
        Ok(Action::zero())
    }
}

/// Uniform torques on [-1, 1]².
pub struct RandomPolicy<R> {
    rng: R,
}

impl<R: Rng> RandomPolicy<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }
}

impl<R: Rng> Policy for RandomPolicy<R> {
    fn act(&mut self, _: &State, _: usize) -> Result<Action> {
        Ok(Action::new(self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)))
    }
}

/// A running manipulator instance.
#[derive(Debug, Clone)]
pub struct ArmEnv {
    pub cfg: EnvConfig,
    pub safe: SafeSetSpec,
    pub cbf: CbfParams,
    joint: JointState,
    target: [f64; 2],
}

impl ArmEnv {
    pub fn new(cfg: EnvConfig, safe: SafeSetSpec, cbf: CbfParams, joint: JointState, target: [f64; 2]) -> Self {
        Self { cfg, safe, cbf, joint, target }
    }

    pub fn reset<R: Rng + ?Sized>(
        rng: &mut R,
        cfg: EnvConfig,
        safe: SafeSetSpec,
        cbf: CbfParams,
        opts: &ResetOptions,
    ) -> Result<Self> {
        let (joint, target) = reset(rng, &cfg, &safe, opts)?;
        Ok(Self::new(cfg, safe, cbf, joint, target))
    }

    pub fn state(&self) -> State {
        State::encode(&self.joint, self.target)
    }

    pub fn joint(&self) -> JointState {
        self.joint
    }

    pub fn target(&self) -> [f64; 2] {
        self.target
    }

    pub fn end_effector(&self) -> [f64; 2] {
        forward_kinematics(&self.joint, &self.cfg)
    }

    /// Advances the arm; `d` is left false for the caller to decide.
    pub fn step(&mut self, action: Action) -> Result<TransitionRecord> {
        let a = Action::new(action.torque1, action.torque2);
        let s = self.state();
        self.joint = step(&self.joint, a, &self.cfg)?;
        let s_next = self.state();
        Ok(TransitionRecord {
            s,
            a,
            s_next,
            r: reward(&s_next, &self.cfg),
            d: false,
            c: label(&s, &s_next, &self.safe, &self.cbf, &self.cfg),
        })
    }

    pub fn success(&self, s: &State) -> bool {
        distance_to_target(s, &self.cfg) < self.cfg.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Run exactly `n` steps, ignoring success.
    Collect(usize),
    /// Stop at the first success or at `max_steps`.
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub records: Vec<TransitionRecord>,
    pub success: bool,
}

/// Runs one episode. `d` is true exactly on the final record.
pub fn rollout_episode(policy: &mut dyn Policy, env: &mut ArmEnv, mode: RolloutMode) -> Result<EpisodeLog> {
    let limit = match mode {
        RolloutMode::Collect(n) => n,
        RolloutMode::Control => env.cfg.max_steps,
    };
    let mut records = Vec::with_capacity(limit);
    let mut success = false;
    for t in 0..limit {
        let s = env.state();
        let a = policy.act(&s, t)?;
        let mut rec = env.step(a)?;
        let reached = env.success(&rec.s_next);
        success |= reached;
        let stop = t + 1 == limit || (mode == RolloutMode::Control && reached);
        rec.d = stop;
        records.push(rec);
        if stop {
            break;
        }
    }
    Ok(EpisodeLog { records, success })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn forward_kinematics_reference_poses() {
        let c = cfg();
        let close = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12;
        assert!(close(forward_kinematics(&JointState::new(0.0, 0.0, 0.0, 0.0), &c), [1.0, 0.0]));
        assert!(close(forward_kinematics(&JointState::new(PI / 2.0, 0.0, 0.0, 0.0), &c), [0.0, 1.0]));
        assert!(close(forward_kinematics(&JointState::new(0.0, PI / 2.0, 0.0, 0.0), &c), [0.5, 0.5]));
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let js = JointState::new(0.3, -1.2, 0.0, 0.0);
        assert_eq!(step(&js, Action::zero(), &cfg()).unwrap(), js);
    }

    #[test]
    fn torque_from_rest_matches_inverse_mass_matrix() {
        let c = cfg();
        let js = JointState::new(0.4, 1.1, 0.0, 0.0);
        let next = step(&js, Action::new(1.0, 0.0), &c).unwrap();
        // analytic inverse of [[a, b], [b, d]] applied to (1, 0)
        let m = mass_matrix(1.1, &c);
        let det = m[0][0] * m[1][1] - m[0][1] * m[0][1];
        let expect = c.dt * m[1][1] / det;
        assert!((next.dalpha1 - expect).abs() < 1e-14);
        assert!((next.dalpha2 - c.dt * (-m[0][1] / det)).abs() < 1e-14);
    }

    #[test]
    fn damped_free_motion_loses_energy() {
        let c = cfg();
        let js = JointState::new(0.2, 0.7, 0.8, -0.5);
        let next = step(&js, Action::zero(), &c).unwrap();
        assert!(kinetic_energy(&next, &c) < kinetic_energy(&js, &c));
    }

    #[test]
    fn non_finite_state_is_an_error() {
        let mut c = cfg();
        c.vel_clamp = f64::INFINITY;
        let js = JointState { alpha1: 0.0, alpha2: 0.0, dalpha1: f64::NAN, dalpha2: 0.0 };
        assert!(matches!(step(&js, Action::zero(), &c), Err(Error::NonFiniteState)));
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5 + TAU) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reward_reference_values() {
        let c = cfg();
        let js = JointState::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(reward(&State::encode(&js, [1.0, 0.0]), &c), 0.0);
        assert!((reward(&State::encode(&js, [0.0, 0.0]), &c) + 1.0).abs() < 1e-12);
        let elbow = JointState::new(0.0, PI / 2.0, 0.0, 0.0);
        assert!((reward(&State::encode(&elbow, [0.2, 0.1]), &c) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic_for_a_seed() {
        let safe = SafeSetSpec::default();
        let a = reset(&mut ChaCha8Rng::seed_from_u64(9), &cfg(), &safe, &ResetOptions::dataset()).unwrap();
        let b = reset(&mut ChaCha8Rng::seed_from_u64(9), &cfg(), &safe, &ResetOptions::dataset()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn annulus_inside_unsafe_disk_is_a_configuration_error() {
        let mut c = cfg();
        c.annulus_min = 0.0;
        c.annulus_max = 0.1;
        let safe = SafeSetSpec { center: [0.0, 0.0], radius: 0.5 };
        let r = reset(&mut ChaCha8Rng::seed_from_u64(1), &c, &safe, &ResetOptions::dataset());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_policy_never_reaches_far_target() {
        let c = cfg();
        let js = JointState::new(0.0, 0.0, 0.0, 0.0);
        let mut env = ArmEnv::new(c, SafeSetSpec::default(), CbfParams::default(), js, [-0.9, 0.0]);
        let log = rollout_episode(&mut ZeroPolicy, &mut env, RolloutMode::Control).unwrap();
        assert_eq!(log.records.len(), c.max_steps);
        assert!(!log.success);
        assert!(log.records.last().unwrap().d);
        assert!(log.records[..c.max_steps - 1].iter().all(|r| !r.d));
    }

    #[test]
    fn target_at_end_effector_succeeds_immediately() {
        let c = cfg();
        let js = JointState::new(0.3, 0.9, 0.0, 0.0);
        let ee = forward_kinematics(&js, &c);
        let mut env = ArmEnv::new(c, SafeSetSpec::default(), CbfParams::default(), js, ee);
        let log = rollout_episode(&mut ZeroPolicy, &mut env, RolloutMode::Control).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(log.success && log.records[0].d);
    }

    #[test]
    fn collect_mode_ignores_success() {
        let c = cfg();
        let js = JointState::new(0.3, 0.9, 0.0, 0.0);
        let ee = forward_kinematics(&js, &c);
        let mut env = ArmEnv::new(c, SafeSetSpec::default(), CbfParams::default(), js, ee);
        let log = rollout_episode(&mut ZeroPolicy, &mut env, RolloutMode::Collect(7)).unwrap();
        assert_eq!(log.records.len(), 7);
        assert_eq!(log.records.iter().filter(|r| r.d).count(), 1);
    }
}
