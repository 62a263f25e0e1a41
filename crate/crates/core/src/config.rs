//! Run configuration: built-in defaults, flat `key = value` files and
//! command-line overrides, merged into one [`RunConfig`].

use crate::cbf::{CbfParams, SafeSetSpec};
use crate::env::EnvConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(PredictionMode { Signal => "signal", Epsilon => "epsilon" });
string_enum!(Backbone { Conv => "conv", Mlp => "mlp" });
string_enum!(GuideMode { None => "none", Value => "value", Safety => "safety", Combined => "combined" });
string_enum!(GradPoint { Mean => "mean", Sample => "sample" });
string_enum!(EvalTargets { Dataset => "dataset", Anywhere => "anywhere", NearUnsafe => "near_unsafe" });

impl GuideMode {
    pub fn uses_value(self) -> bool {
        matches!(self, GuideMode::Value | GuideMode::Combined)
    }

    pub fn uses_safety(self) -> bool {
        matches!(self, GuideMode::Safety | GuideMode::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfSection {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub lambda: f64,
}

impl Default for CbfSection {
    fn default() -> Self {
        let s = SafeSetSpec::default();
        Self { center_x: s.center[0], center_y: s.center[1], radius: s.radius, lambda: CbfParams::default().lambda }
    }
}

impl CbfSection {
    pub fn safe_set(&self) -> SafeSetSpec {
        SafeSetSpec { center: [self.center_x, self.center_y], radius: self.radius }
    }

    pub fn params(&self) -> CbfParams {
        CbfParams { lambda: self.lambda }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub episodes: usize,
    pub steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 300, steps: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: PredictionMode,
    pub cosine_s: f64,
    pub beta_clip: f64,
    pub gamma: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { k: 50, mode: PredictionMode::Signal, cosine_s: 0.008, beta_clip: 0.999, gamma: 0.997 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: Backbone::Conv, blocks: 3, channels: 32, kernel: 5, embed_dim: 32, hidden: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub holdout_frac: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            lr: 2e-4,
            seed: 0,
            holdout_frac: 0.1,
            weight_decay: 0.01,
            eval_every: 100,
            eval_windows: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub batch: usize,
    pub horizon: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub mode: GuideMode,
    pub grad_point: GradPoint,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { batch: 64, horizon: 16, eta1: 0.001, eta2: 5.0, mode: GuideMode::Combined, grad_point: GradPoint::Mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: usize,
    pub targets: EvalTargets,
    pub near_factor: f64,
    pub start_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 20, seeds: 3, targets: EvalTargets::Dataset, near_factor: 1.5, start_margin: 0.05 }
    }
}

/// Every tunable of a run. Serialized verbatim into artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub cbf: CbfSection,
    pub data: DataConfig,
    pub diff: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

pub const KEYS: &[&str] = &[
    "seed",
    "env.l1",
    "env.l2",
    "env.m1",
    "env.m2",
    "env.damping",
    "env.dt",
    "env.vel_clamp",
    "env.annulus_min",
    "env.annulus_max",
    "env.max_steps",
    "env.tolerance",
    "cbf.center_x",
    "cbf.center_y",
    "cbf.radius",
    "cbf.lambda",
    "data.episodes",
    "data.steps",
    "diff.K",
    "diff.mode",
    "diff.cosine_s",
    "diff.beta_clip",
    "diff.gamma",
    "model.backbone",
    "model.blocks",
    "model.channels",
    "model.kernel",
    "model.embed_dim",
    "model.hidden",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.seed",
    "train.holdout_frac",
    "train.weight_decay",
    "train.eval_every",
    "train.eval_windows",
    "plan.batch",
    "plan.horizon",
    "plan.eta1",
    "plan.eta2",
    "plan.mode",
    "plan.grad_point",
    "eval.episodes",
    "eval.seeds",
    "eval.targets",
    "eval.near_factor",
    "eval.start_margin",
];

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "env.l1" => self.env.l1 = parse(key, v)?,
            "env.l2" => self.env.l2 = parse(key, v)?,
            "env.m1" => self.env.m1 = parse(key, v)?,
            "env.m2" => self.env.m2 = parse(key, v)?,
            "env.damping" => self.env.damping = parse(key, v)?,
            "env.dt" => self.env.dt = parse(key, v)?,
            "env.vel_clamp" => self.env.vel_clamp = parse(key, v)?,
            "env.annulus_min" => self.env.annulus_min = parse(key, v)?,
            "env.annulus_max" => self.env.annulus_max = parse(key, v)?,
            "env.max_steps" => self.env.max_steps = parse(key, v)?,
            "env.tolerance" => self.env.tolerance = parse(key, v)?,
            "cbf.center_x" => self.cbf.center_x = parse(key, v)?,
            "cbf.center_y" => self.cbf.center_y = parse(key, v)?,
            "cbf.radius" => self.cbf.radius = parse(key, v)?,
            "cbf.lambda" => self.cbf.lambda = parse(key, v)?,
            "data.episodes" => self.data.episodes = parse(key, v)?,
            "data.steps" => self.data.steps = parse(key, v)?,
            "diff.K" => self.diff.k = parse(key, v)?,
            "diff.mode" => self.diff.mode = parse(key, v)?,
            "diff.cosine_s" => self.diff.cosine_s = parse(key, v)?,
            "diff.beta_clip" => self.diff.beta_clip = parse(key, v)?,
            "diff.gamma" => self.diff.gamma = parse(key, v)?,
            "model.backbone" => self.model.backbone = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.channels" => self.model.channels = parse(key, v)?,
            "model.kernel" => self.model.kernel = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.hidden" => self.model.hidden = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.holdout_frac" => self.train.holdout_frac = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.eval_windows" => self.train.eval_windows = parse(key, v)?,
            "plan.batch" => self.plan.batch = parse(key, v)?,
            "plan.horizon" => self.plan.horizon = parse(key, v)?,
            "plan.eta1" => self.plan.eta1 = parse(key, v)?,
            "plan.eta2" => self.plan.eta2 = parse(key, v)?,
            "plan.mode" => self.plan.mode = parse(key, v)?,
            "plan.grad_point" => self.plan.grad_point = parse(key, v)?,
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.seeds" => self.eval.seeds = parse(key, v)?,
            "eval.targets" => self.eval.targets = parse(key, v)?,
            "eval.near_factor" => self.eval.near_factor = parse(key, v)?,
            "eval.start_margin" => self.eval.start_margin = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies a flat config text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn load(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(t) = file_text {
            cfg.apply_text(t)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.cbf.safe_set().validate(&self.env)?;
        self.cbf.params().validate()?;
        let positive = [
            ("diff.K", self.diff.k),
            ("data.steps", self.data.steps),
            ("model.channels", self.model.channels),
            ("model.blocks", self.model.blocks),
            ("model.embed_dim", self.model.embed_dim),
            ("model.hidden", self.model.hidden),
            ("train.batch", self.train.batch),
            ("train.eval_every", self.train.eval_every),
            ("train.eval_windows", self.train.eval_windows),
            ("plan.batch", self.plan.batch),
            ("plan.horizon", self.plan.horizon),
            ("eval.seeds", self.eval.seeds),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        if self.model.kernel % 2 == 0 {
            return Err(Error::Config("model.kernel must be odd (same padding)".into()));
        }
        if !(0.0..1.0).contains(&self.train.holdout_frac) {
            return Err(Error::Config("train.holdout_frac must be in [0, 1)".into()));
        }
        if !(self.diff.beta_clip > 0.0 && self.diff.beta_clip < 1.0) || self.diff.cosine_s < 0.0 {
            return Err(Error::Config("diff.beta_clip must be in (0, 1) and diff.cosine_s >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.diff.gamma) {
            return Err(Error::Config("diff.gamma must be in [0, 1]".into()));
        }
        if self.plan.eta1 < 0.0 || self.plan.eta2 < 0.0 {
            return Err(Error::Config("plan.eta1 and plan.eta2 must be non-negative".into()));
        }
        if !(self.train.lr > 0.0) || self.train.weight_decay < 0.0 {
            return Err(Error::Config("train.lr must be positive and train.weight_decay non-negative".into()));
        }
        if !(self.eval.near_factor > 0.0) {
            return Err(Error::Config("eval.near_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serializable")
    }

    /// Renders the config in the flat file format, one key per line.
    pub fn to_flat_text(&self) -> String {
        let json = self.to_json();
        let mut out = String::new();
        for key in KEYS {
            let mut node = &json;
            for part in key.split('.') {
                node = &node[part];
            }
            let text = match node {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
        out
    }
}
