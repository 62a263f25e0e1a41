//! Loading the trained checkpoints a planner needs.

use crate::config::{DiffusionConfig, GuideMode, RunConfig};
use crate::dataset::Normalizer;
use crate::diffusion::NoiseSchedule;
use crate::models::{ModelKind, Network};
use crate::planner::{Guide, GuideConfig, Planner};
use crate::{Error, Result};
use std::path::Path;

/// Frozen networks sharing one normalizer, horizon and schedule.
pub struct ModelSet {
    pub dynamics: Network<f32>,
    pub value: Option<Network<f32>>,
    pub safety: Option<Network<f32>>,
    pub normalizer: Normalizer,
    pub diffusion: DiffusionConfig,
    pub schedule: NoiseSchedule,
}

pub fn load_network(path: &Path, kind: ModelKind) -> Result<(Network<f32>, crate::models::ModelMeta)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let ck = sdp_nn::read_checkpoint(path)?;
    Network::from_checkpoint(&ck, kind)
}

impl ModelSet {
    /// Loads `dynamics.sdpm` plus whichever guides the mode needs; guides
    /// present on disk but not needed are loaded too, for diagnostics.
    pub fn load(dir: &Path, mode: GuideMode) -> Result<Self> {
        let (dynamics, meta) = load_network(&dir.join(ModelKind::Dynamics.file_name()), ModelKind::Dynamics)?;
        let load_guide = |kind: ModelKind, needed: bool| -> Result<Option<Network<f32>>> {
            let path = dir.join(kind.file_name());
            if !needed && !path.exists() {
                return Ok(None);
            }
            let (net, m) = load_network(&path, kind)?;
            if m.horizon != meta.horizon || m.normalizer != meta.normalizer {
                return Err(Error::Invalid(format!(
                    "{} checkpoint was trained on a different dataset or horizon than the dynamics model",
                    kind
                )));
            }
            Ok(Some(net))
        };
        let value = load_guide(ModelKind::Value, mode.uses_value())?;
        let safety = load_guide(ModelKind::Safety, mode.uses_safety())?;
        let schedule = NoiseSchedule::from_config(&meta.diffusion)?;
        Ok(Self { dynamics, value, safety, normalizer: meta.normalizer, diffusion: meta.diffusion, schedule })
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }

    pub fn planner(&self, cfg: &RunConfig, guide: GuideConfig) -> Planner<'_> {
        Planner {
            denoiser: &self.dynamics,
            value: self.value.as_ref().map(|v| v as &dyn Guide),
            safety: self.safety.as_ref().map(|s| s as &dyn Guide),
            schedule: &self.schedule,
            mode: self.diffusion.mode,
            normalizer: &self.normalizer,
            guide,
            batch: cfg.plan.batch,
            env: cfg.env,
            safe: cfg.cbf.safe_set(),
        }
    }
}
