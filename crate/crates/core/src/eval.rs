//! Episode orchestration, metrics, guide-scale ablation and the paired
//! safety comparison.
//!
//! Episodes are identified by `(seed, episode)`. The reset generator depends
//! only on that pair, so two planner configurations evaluated on the same
//! seeds face bit-identical targets and initial states. Standard deviations
//! use the population formula.

use crate::bundle::ModelSet;
use crate::cbf::{barrier_at, h};
use crate::config::{EvalTargets, GuideMode, RunConfig};
use crate::env::{
    distance_to_target, rollout_episode, ArmEnv, Policy, ResetOptions, RolloutMode, TargetMode,
};
use crate::planner::{GuideConfig, RecedingHorizon};
use crate::{seed, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeId {
    pub seed: u64,
    pub episode: usize,
}

/// One environment step as written to the JSON-lines episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub seed: u64,
    pub episode: usize,
    pub t: usize,
    pub s: [f64; 8],
    pub a: [f64; 2],
    pub s_next: [f64; 8],
    pub r: f64,
    pub d: bool,
    pub c: u8,
    /// Barrier value of the realized next state.
    pub h: f64,
    pub distance: f64,
    pub reached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub id: EpisodeId,
    pub target: [f64; 2],
    pub h0: f64,
    pub success: bool,
    pub steps: usize,
    pub total_reward: f64,
    pub unsafe_steps: usize,
    pub label_violations: usize,
    pub min_h: f64,
    pub records: Vec<StepRecord>,
}

impl EpisodeOutcome {
    pub fn h_series(&self) -> Vec<f64> {
        std::iter::once(self.h0).chain(self.records.iter().map(|r| r.h)).collect()
    }
}

pub fn reset_options(cfg: &RunConfig, targets: EvalTargets) -> ResetOptions {
    match targets {
        EvalTargets::Dataset => ResetOptions { target: TargetMode::Dataset, safe_start_margin: None },
        EvalTargets::Anywhere => ResetOptions::evaluation(),
        EvalTargets::NearUnsafe => ResetOptions {
            target: TargetMode::NearUnsafe { factor: cfg.eval.near_factor },
            safe_start_margin: Some(cfg.eval.start_margin),
        },
    }
}

pub fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.seeds as u64).map(|j| cfg.seed.wrapping_add(j)).collect()
}

pub fn episode_ids(cfg: &RunConfig) -> Vec<EpisodeId> {
    seeds(cfg)
        .into_iter()
        .flat_map(|seed| (0..cfg.eval.episodes).map(move |episode| EpisodeId { seed, episode }))
        .collect()
}

/// Runs one control episode with the given policy.
pub fn run_episode(cfg: &RunConfig, id: EpisodeId, opts: &ResetOptions, policy: &mut dyn Policy) -> Result<EpisodeOutcome> {
    let env = reset_env(cfg, id, opts)?;
    run_in_env(cfg, id, env, policy)
}

/// The environment episode `id` starts from.
pub fn reset_env(cfg: &RunConfig, id: EpisodeId, opts: &ResetOptions) -> Result<ArmEnv> {
    let mut rng = seed::rng(id.seed, &[seed::tag::RESET, id.episode as u64]);
    ArmEnv::reset(&mut rng, cfg.env, cfg.cbf.safe_set(), cfg.cbf.params(), opts)
}

/// Runs a control episode from an already prepared environment.
pub fn run_in_env(cfg: &RunConfig, id: EpisodeId, mut env: ArmEnv, policy: &mut dyn Policy) -> Result<EpisodeOutcome> {
    let safe = cfg.cbf.safe_set();
    let h0 = h(&env.state(), &safe, &cfg.env);
    let target = env.target();
    let log = rollout_episode(policy, &mut env, RolloutMode::Control)?;
    let mut notes = policy.take_annotations().into_iter();
    let records: Vec<StepRecord> = log
        .records
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let distance = distance_to_target(&r.s_next, &cfg.env);
            StepRecord {
                seed: id.seed,
                episode: id.episode,
                t,
                s: r.s.0,
                a: r.a.to_array(),
                s_next: r.s_next.0,
                r: r.r,
                d: r.d,
                c: r.c,
                h: h(&r.s_next, &safe, &cfg.env),
                distance,
                reached: distance < cfg.env.tolerance,
                plan: notes.next(),
            }
        })
        .collect();
    Ok(summarize_episode(id, target, h0, records))
}

fn summarize_episode(id: EpisodeId, target: [f64; 2], h0: f64, records: Vec<StepRecord>) -> EpisodeOutcome {
    EpisodeOutcome {
        id,
        target,
        h0,
        success: records.iter().any(|r| r.reached),
        steps: records.len(),
        total_reward: records.iter().map(|r| r.r).sum(),
        unsafe_steps: records.iter().filter(|r| r.h < 0.0).count(),
        label_violations: records.iter().filter(|r| r.c == 1).count(),
        min_h: records.iter().map(|r| r.h).fold(h0, f64::min),
        records,
    }
}

/// Runs every listed episode, in parallel, returning outcomes in list order.
pub fn run_episodes<'a, F>(cfg: &RunConfig, ids: &[EpisodeId], opts: &ResetOptions, make_policy: F) -> Result<Vec<EpisodeOutcome>>
where
    F: Fn(EpisodeId) -> Result<Box<dyn Policy + Send + 'a>> + Sync,
{
    ids.par_iter()
        .map(|&id| {
            let mut policy = make_policy(id)?;
            run_episode(cfg, id, opts, policy.as_mut())
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub avg_reward: f64,
    pub std_reward: f64,
    pub avg_steps: f64,
    pub std_steps: f64,
    /// Steps whose realized state is inside the unsafe disk (`h < 0`).
    pub unsafe_entries_total: usize,
    pub unsafe_entries_per_episode: Vec<usize>,
    /// Steps labelled as barrier-condition violations (`c = 1`).
    pub label_violations_total: usize,
    pub seeds: Vec<u64>,
    pub std_formula: String,
}

/// Aggregates episodes in the given order.
pub fn report(outcomes: &[EpisodeOutcome]) -> EvalReport {
    let rewards: Vec<f64> = outcomes.iter().map(|o| o.total_reward).collect();
    let steps: Vec<f64> = outcomes.iter().map(|o| o.steps as f64).collect();
    let (avg_reward, std_reward) = mean_std(&rewards);
    let (avg_steps, std_steps) = mean_std(&steps);
    let successes = outcomes.iter().filter(|o| o.success).count();
    let mut seeds: Vec<u64> = Vec::new();
    for o in outcomes {
        if !seeds.contains(&o.id.seed) {
            seeds.push(o.id.seed);
        }
    }
    let per: Vec<usize> = outcomes.iter().map(|o| o.unsafe_steps).collect();
    EvalReport {
        episodes: outcomes.len(),
        successes,
        success_rate: if outcomes.is_empty() { 0.0 } else { successes as f64 / outcomes.len() as f64 },
        avg_reward,
        std_reward,
        avg_steps,
        std_steps,
        unsafe_entries_total: per.iter().sum(),
        unsafe_entries_per_episode: per,
        label_violations_total: outcomes.iter().map(|o| o.label_violations).sum(),
        seeds,
        std_formula: "population".into(),
    }
}

/// Rebuilds the report from JSON-lines step records alone.
pub fn report_from_log(text: &str) -> Result<EvalReport> {
    let mut episodes: Vec<(EpisodeId, Vec<StepRecord>)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepRecord = serde_json::from_str(line)?;
        let id = EpisodeId { seed: rec.seed, episode: rec.episode };
        match episodes.last_mut() {
            Some((last, recs)) if *last == id => recs.push(rec),
            _ => episodes.push((id, vec![rec])),
        }
    }
    let outcomes: Vec<EpisodeOutcome> =
        episodes.into_iter().map(|(id, recs)| summarize_episode(id, [0.0; 2], f64::INFINITY, recs)).collect();
    Ok(report(&outcomes))
}

pub fn log_lines(outcomes: &[EpisodeOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        for r in &o.records {
            out.push_str(&serde_json::to_string(r).expect("records are serializable"));
            out.push('\n');
        }
    }
    out
}

/// Guide configuration for a mode, scales taken from the run config.
pub fn guide_for(cfg: &RunConfig, mode: GuideMode) -> GuideConfig {
    GuideConfig { mode, ..GuideConfig::from_plan(&cfg.plan) }
}

/// Planner episodes over `eval.seeds × eval.episodes`.
pub fn evaluate_with(
    cfg: &RunConfig,
    models: &ModelSet,
    guide: GuideConfig,
    targets: EvalTargets,
) -> Result<Vec<EpisodeOutcome>> {
    models.planner(cfg, guide).check()?;
    let opts = reset_options(cfg, targets);
    run_episodes(cfg, &episode_ids(cfg), &opts, |id| {
        let plan_seed = seed::derive(id.seed, &[seed::tag::EVAL, id.episode as u64]);
        Ok(Box::new(RecedingHorizon::new(models.planner(cfg, guide), plan_seed)) as Box<dyn Policy + Send + '_>)
    })
}

pub fn evaluate(cfg: &RunConfig, models: &ModelSet, guide: GuideConfig) -> Result<(EvalReport, Vec<EpisodeOutcome>)> {
    let outcomes = evaluate_with(cfg, models, guide, cfg.eval.targets)?;
    Ok((report(&outcomes), outcomes))
}

pub const ABLATION_GRID: [f64; 5] = [0.1, 0.01, 0.001, 0.0005, 0.0001];

/// One report per value-guide scale.
pub fn ablate(cfg: &RunConfig, models: &ModelSet, mode: GuideMode, grid: &[f64]) -> Result<Vec<(f64, EvalReport)>> {
    grid.iter()
        .map(|&eta1| {
            let guide = GuideConfig { eta1, ..guide_for(cfg, mode) };
            Ok((eta1, evaluate(cfg, models, guide)?.0))
        })
        .collect()
}

/// Aligned plain-text table with columns
/// `Guide Scale | Succ. Rate | Avg. Rew. | Avg. Steps`.
pub fn ablation_table(rows: &[(f64, EvalReport)]) -> String {
    let header = ["Guide Scale", "Succ. Rate", "Avg. Rew.", "Avg. Steps"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|(eta, r)| {
            [
                format!("{eta}"),
                format!("{:.2}", r.success_rate),
                format!("{:.2} ± {:.2}", r.avg_reward, r.std_reward),
                format!("{:.2} ± {:.2}", r.avg_steps, r.std_steps),
            ]
        })
        .collect();
    let width = |i: usize| body.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0);
    let widths: Vec<usize> = (0..4).map(width).collect();
    let fmt_row = |cells: [&str; 4]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", fmt_row(header)).unwrap();
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    writeln!(out, "{}", rule.join("-|-")).unwrap();
    for r in &body {
        writeln!(out, "{}", fmt_row([&r[0], &r[1], &r[2], &r[3]])).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedEpisode {
    pub id: EpisodeId,
    pub target: [f64; 2],
    pub target_inside_disk: bool,
    pub value_unsafe_steps: usize,
    pub combined_unsafe_steps: usize,
    /// `combined − value` unsafe steps.
    pub delta: i64,
    pub value_min_h: f64,
    pub combined_min_h: f64,
    pub value_steps: usize,
    pub combined_steps: usize,
    /// Fraction of combined-mode steps with `h < −0.05`.
    pub combined_deep_fraction: f64,
    pub value_h: Vec<f64>,
    pub combined_h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyComparison {
    pub episodes: Vec<PairedEpisode>,
    pub value_unsafe_total: usize,
    pub combined_unsafe_total: usize,
    /// `1 − combined/value`, absent when value-only never entered the disk.
    pub reduction: Option<f64>,
    pub max_deep_fraction_inside_targets: f64,
    pub value_report: EvalReport,
    pub combined_report: EvalReport,
}

pub const DEEP_INCURSION: f64 = -0.05;

/// Pairs two arms episode by episode.
pub fn pair_outcomes(cfg: &RunConfig, value: &[EpisodeOutcome], combined: &[EpisodeOutcome]) -> Result<SafetyComparison> {
    if value.len() != combined.len() {
        return Err(Error::Invalid("paired arms ran different episode counts".into()));
    }
    let safe = cfg.cbf.safe_set();
    let mut episodes = Vec::with_capacity(value.len());
    for (v, c) in value.iter().zip(combined) {
        if v.id != c.id || v.target != c.target {
            return Err(Error::Invalid("paired arms saw different episodes".into()));
        }
        let deep = c.records.iter().filter(|r| r.h < DEEP_INCURSION).count();
        episodes.push(PairedEpisode {
            id: v.id,
            target: v.target,
            target_inside_disk: barrier_at(v.target, &safe) < 0.0,
            value_unsafe_steps: v.unsafe_steps,
            combined_unsafe_steps: c.unsafe_steps,
            delta: c.unsafe_steps as i64 - v.unsafe_steps as i64,
            value_min_h: v.min_h,
            combined_min_h: c.min_h,
            value_steps: v.steps,
            combined_steps: c.steps,
            combined_deep_fraction: deep as f64 / c.steps.max(1) as f64,
            value_h: v.h_series(),
            combined_h: c.h_series(),
        });
    }
    let value_unsafe_total: usize = episodes.iter().map(|e| e.value_unsafe_steps).sum();
    let combined_unsafe_total: usize = episodes.iter().map(|e| e.combined_unsafe_steps).sum();
    Ok(SafetyComparison {
        reduction: (value_unsafe_total > 0).then(|| 1.0 - combined_unsafe_total as f64 / value_unsafe_total as f64),
        max_deep_fraction_inside_targets: episodes
            .iter()
            .filter(|e| e.target_inside_disk)
            .map(|e| e.combined_deep_fraction)
            .fold(0.0, f64::max),
        value_unsafe_total,
        combined_unsafe_total,
        episodes,
        value_report: report(value),
        combined_report: report(combined),
    })
}

/// Value-only against combined guidance on targets near the unsafe disk.
pub fn compare_safety(cfg: &RunConfig, models: &ModelSet) -> Result<(SafetyComparison, Vec<EpisodeOutcome>, Vec<EpisodeOutcome>)> {
    let value = evaluate_with(cfg, models, guide_for(cfg, GuideMode::Value), EvalTargets::NearUnsafe)?;
    let combined = evaluate_with(cfg, models, guide_for(cfg, GuideMode::Combined), EvalTargets::NearUnsafe)?;
    Ok((pair_outcomes(cfg, &value, &combined)?, value, combined))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn table_header_and_alignment() {
        let r = report(&[]);
        let t = ablation_table(&[(0.1, r.clone()), (0.0005, r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Guide Scale | Succ. Rate | Avg. Rew."));
        assert!(lines[0].trim_end().ends_with("Avg. Steps"));
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("0.0005      | 0.00"));
    }
}
