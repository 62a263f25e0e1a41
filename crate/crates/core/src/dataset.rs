//! Offline transition data: random-policy collection, the `.sdpd` file
//! format, min/max normalization and fixed-length training windows.
//!
//! File layout (little-endian):
//!
//! ```text
//! "SDPD" | u32 version | u32 episodes | u32 steps | u32 record_size
//!        | u32 json_len | config echo (UTF-8 JSON)
//!        | records: f32 × record_size, episode-major
//! ```
//!
//! Each record is `s[8], a[2], s_next[8], r, d, c` with `d` and `c` stored
//! as 0.0 / 1.0.

use crate::cbf::{h, label};
use crate::config::RunConfig;
use crate::env::{
    reward, rollout_episode, Action, ArmEnv, RandomPolicy, ResetOptions, RolloutMode, State, TransitionRecord,
    ACTION_DIM, STATE_DIM, TRANSITION_DIM,
};
use crate::{seed, Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDPD";
pub const VERSION: u32 = 1;
pub const RECORD_SIZE: usize = 2 * STATE_DIM + ACTION_DIM + 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: usize,
    pub steps: usize,
    /// Effective configuration the data was generated with.
    pub config: serde_json::Value,
    pub records: Vec<TransitionRecord>,
}

/// Generates `episodes × steps` transitions with uniformly random torques.
/// Rewards and labels are computed on the `f32`-rounded states that get
/// stored, so both are exactly recomputable from the file.
pub fn collect(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (episodes, steps) = (cfg.data.episodes, cfg.data.steps);
    let safe = cfg.cbf.safe_set();
    let params = cfg.cbf.params();
    let mut records = Vec::with_capacity(episodes * steps);
    for ep in 0..episodes {
        let mut rng = seed::rng(cfg.seed, &[seed::tag::COLLECT, ep as u64]);
        let mut env = ArmEnv::reset(&mut rng, cfg.env, safe, params, &ResetOptions::dataset())?;
        let mut policy = RandomPolicy::new(rng);
        let log = rollout_episode(&mut policy, &mut env, RolloutMode::Collect(steps))?;
        for rec in log.records {
            let s = rec.s.quantized();
            let s_next = rec.s_next.quantized();
            let a = Action { torque1: rec.a.torque1 as f32 as f64, torque2: rec.a.torque2 as f32 as f64 };
            let r = reward(&s_next, &cfg.env) as f32 as f64;
            let c = label(&s, &s_next, &safe, &params, &cfg.env);
            records.push(TransitionRecord { s, a, s_next, r, d: rec.d, c });
        }
    }
    Ok(Dataset { episodes, steps, config: cfg.to_json(), records })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn episode(&self, e: usize) -> &[TransitionRecord] {
        &self.records[e * self.steps..(e + 1) * self.steps]
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.records.len() != self.episodes * self.steps {
            return Err(Error::Format("record count does not match episodes × steps".into()));
        }
        let json = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(24 + json.len() + self.records.len() * RECORD_SIZE * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.episodes as u32, self.steps as u32, RECORD_SIZE as u32, json.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&json);
        let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for r in &self.records {
            r.s.0.iter().for_each(|&v| push(v));
            push(r.a.torque1);
            push(r.a.torque2);
            r.s_next.0.iter().for_each(|&v| push(v));
            push(r.r);
            push(if r.d { 1.0 } else { 0.0 });
            push(f64::from(r.c));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(fmt("missing SDPD magic"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, episodes, steps, record_size, json_len) = (u(0), u(1), u(2), u(3), u(4));
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        if record_size != RECORD_SIZE {
            return Err(Error::Format(format!("record size {record_size}, expected {RECORD_SIZE}")));
        }
        let json = bytes.get(24..24 + json_len).ok_or_else(|| fmt("truncated config echo"))?;
        let config: serde_json::Value = serde_json::from_slice(json)?;
        let body = &bytes[24 + json_len..];
        let n = episodes * steps;
        if body.len() != n * RECORD_SIZE * 4 {
            return Err(Error::Format(format!(
                "expected {} record bytes, found {}",
                n * RECORD_SIZE * 4,
                body.len()
            )));
        }
        let floats: Vec<f64> =
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let flag = |v: f64, what: &str| -> Result<bool> {
            match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::Format(format!("{what} flag must be 0 or 1, found {v}"))),
            }
        };
        let mut records = Vec::with_capacity(n);
        for f in floats.chunks_exact(RECORD_SIZE) {
            let mut s = [0.0; STATE_DIM];
            let mut s_next = [0.0; STATE_DIM];
            s.copy_from_slice(&f[..STATE_DIM]);
            s_next.copy_from_slice(&f[STATE_DIM + ACTION_DIM..2 * STATE_DIM + ACTION_DIM]);
            let tail = &f[2 * STATE_DIM + ACTION_DIM..];
            records.push(TransitionRecord {
                s: State(s),
                a: Action { torque1: f[STATE_DIM], torque2: f[STATE_DIM + 1] },
                s_next: State(s_next),
                r: tail[0],
                d: flag(tail[1], "terminal")?,
                c: u8::from(flag(tail[2], "label")?),
            });
        }
        Ok(Dataset { episodes, steps, config, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("cannot read dataset {}: {e}", path.display())))
        })?;
        Self::decode(&bytes)
    }

    /// Header plus summary statistics, for `inspect`.
    pub fn summary(&self) -> serde_json::Value {
        let n = self.records.len().max(1) as f64;
        let rewards: Vec<f64> = self.records.iter().map(|r| r.r).collect();
        let mean_r = rewards.iter().sum::<f64>() / n;
        let min_r = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_r = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unsafe_labels = self.records.iter().filter(|r| r.c == 1).count();
        let inside = match self.run_config() {
            Ok(cfg) => {
                let safe = cfg.cbf.safe_set();
                Some(self.records.iter().filter(|r| h(&r.s_next, &safe, &cfg.env) < 0.0).count())
            }
            Err(_) => None,
        };
        serde_json::json!({
            "format": "sdpd",
            "version": VERSION,
            "episodes": self.episodes,
            "steps": self.steps,
            "record_size": RECORD_SIZE,
            "records": self.records.len(),
            "reward": {"mean": mean_r, "min": min_r, "max": max_r},
            "labels_unsafe": unsafe_labels,
            "labels_unsafe_frac": unsafe_labels as f64 / n,
            "states_inside_unsafe_disk": inside,
            "config": self.config,
        })
    }
}

/// Per-dimension affine map of transition rows onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Invalid("cannot fit a normalizer on an empty dataset".into()));
        }
        let mut min = vec![f64::INFINITY; TRANSITION_DIM];
        let mut max = vec![f64::NEG_INFINITY; TRANSITION_DIM];
        let mut see = |row: [f64; TRANSITION_DIM]| {
            for d in 0..TRANSITION_DIM {
                min[d] = min[d].min(row[d]);
                max[d] = max[d].max(row[d]);
            }
        };
        for r in &ds.records {
            see(transition_row(&r.s, &r.a));
            see(transition_row(&r.s_next, &r.a));
        }
        Ok(Self { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, d: usize) -> bool {
        self.max[d] <= self.min[d]
    }

    pub fn normalize(&self, d: usize, x: f64) -> f64 {
        if self.is_constant(d) {
            0.0
        } else {
            2.0 * (x - self.min[d]) / (self.max[d] - self.min[d]) - 1.0
        }
    }

    pub fn denormalize(&self, d: usize, y: f64) -> f64 {
        if self.is_constant(d) {
            self.min[d]
        } else {
            (y + 1.0) * 0.5 * (self.max[d] - self.min[d]) + self.min[d]
        }
    }

    /// Normalizes the first `STATE_DIM` dims of a state into `out`.
    pub fn normalize_state(&self, s: &State) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.normalize(d, s.0[d]);
        }
        out
    }

    /// Splits a normalized row into a raw state and an (unclamped) action.
    pub fn denormalize_row(&self, row: &[f64]) -> (State, [f64; ACTION_DIM]) {
        let mut s = [0.0; STATE_DIM];
        for (d, v) in s.iter_mut().enumerate() {
            *v = self.denormalize(d, row[d]);
        }
        let a = [self.denormalize(STATE_DIM, row[STATE_DIM]), self.denormalize(STATE_DIM + 1, row[STATE_DIM + 1])];
        (State(s), a)
    }
}

pub fn transition_row(s: &State, a: &Action) -> [f64; TRANSITION_DIM] {
    let mut row = [0.0; TRANSITION_DIM];
    row[..STATE_DIM].copy_from_slice(&s.0);
    row[STATE_DIM] = a.torque1;
    row[STATE_DIM + 1] = a.torque2;
    row
}

/// Discounted sum `Σ γ^i r_i`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

/// Location of one window inside the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowIndex {
    pub episode: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `H × 10` normalized `(state ‖ action)` rows, row-major.
    pub traj: Vec<f64>,
    pub value_target: f64,
    pub labels: Vec<u8>,
    pub first_state_raw: State,
    pub index: WindowIndex,
}

/// Every in-episode window start for the given episodes, in order.
pub fn window_indices(ds: &Dataset, episodes: std::ops::Range<usize>, horizon: usize) -> Vec<WindowIndex> {
    if horizon == 0 || horizon > ds.steps {
        return Vec::new();
    }
    episodes
        .flat_map(|episode| (0..=ds.steps - horizon).map(move |start| WindowIndex { episode, start }))
        .collect()
}

pub fn window(ds: &Dataset, norm: &Normalizer, idx: WindowIndex, horizon: usize, gamma: f64) -> WindowSample {
    let recs = &ds.episode(idx.episode)[idx.start..idx.start + horizon];
    let mut traj = Vec::with_capacity(horizon * TRANSITION_DIM);
    for r in recs {
        let row = transition_row(&r.s, &r.a);
        traj.extend(row.iter().enumerate().map(|(d, &x)| norm.normalize(d, x)));
    }
    let rewards: Vec<f64> = recs.iter().map(|r| r.r).collect();
    WindowSample {
        traj,
        value_target: discounted_return(&rewards, gamma),
        labels: recs.iter().map(|r| r.c).collect(),
        first_state_raw: recs[0].s,
        index: idx,
    }
}

/// All windows of the given episodes, materialized in sequential order.
pub fn windows(
    ds: &Dataset,
    norm: &Normalizer,
    episodes: std::ops::Range<usize>,
    horizon: usize,
    gamma: f64,
) -> Vec<WindowSample> {
    window_indices(ds, episodes, horizon).into_iter().map(|i| window(ds, norm, i, horizon, gamma)).collect()
}

/// Train / held-out episode ranges: the last `frac` of episodes are held out.
pub fn split_episodes(episodes: usize, frac: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let held = ((episodes as f64) * frac).round() as usize;
    let held = if frac > 0.0 && episodes > 1 { held.clamp(1, episodes - 1) } else { 0 };
    (0..episodes - held, episodes - held..episodes)
}
