//! `sdp`: collect an offline dataset, train the three networks, then plan
//! and evaluate with guided diffusion.

mod export;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sdp_core::bundle::ModelSet;
use sdp_core::config::{EvalTargets, GuideMode};
use sdp_core::dataset::{collect, Dataset};
use sdp_core::env::{ArmEnv, Policy};
use sdp_core::eval::{self, EpisodeId, EpisodeOutcome};
use sdp_core::models::{ModelKind, ModelMeta};
use sdp_core::planner::RecedingHorizon;
use sdp_core::training::{heldout_metrics, train_model, TrainingData};
use sdp_core::{seed, RunConfig};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sdp", version, about = "Safe guided diffusion planning for a two-link arm")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides `seed` from the file and `--set`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Suppress progress and summaries on stdout/stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset (`OUT/dataset.sdpd`).
    Collect,
    /// Train checkpoints (`OUT/<model>.sdpm`).
    Train {
        #[arg(long, default_value = "all", value_parser = ["dynamics", "value", "safety", "all"])]
        model: String,
        /// Dataset to train on; defaults to `OUT/dataset.sdpd`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one receding-horizon episode with logs, CSV and SVG snapshots.
    Plan {
        #[arg(long, default_value = "combined")]
        mode: GuideMode,
        /// Checkpoint directory; defaults to OUT.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Episode index selecting the initial state and target.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Replace the sampled target with `X,Y`.
        #[arg(long, value_parser = parse_point, value_name = "X,Y")]
        target: Option<[f64; 2]>,
        /// Snapshot stride in environment steps; 0 keeps only first and last.
        #[arg(long, default_value_t = 10)]
        snapshot_every: usize,
    },
    /// Evaluate the planner over `eval.seeds × eval.episodes`.
    Eval {
        /// Guide mode; defaults to `plan.mode`.
        #[arg(long)]
        mode: Option<GuideMode>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Grid search over the value-guide scale.
    Ablate {
        #[arg(long, default_value = "value")]
        mode: GuideMode,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Comma-separated scales.
        #[arg(long, value_delimiter = ',', default_values_t = eval::ABLATION_GRID)]
        grid: Vec<f64>,
    },
    /// Value-only against combined guidance on targets near the unsafe disk.
    CompareSafety {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Print a dataset or checkpoint header as JSON.
    Inspect { path: PathBuf },
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => {
            let p = |v: &str| v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
            Ok([p(x)?, p(y)?])
        }
        _ => Err(format!("expected X,Y, got `{s}`")),
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn print(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = if sub.is_empty() { self.out.clone() } else { self.out.join(sub) };
        std::fs::create_dir_all(&d).map_err(|e| io_error(e, "cannot create", &d))?;
        Ok(d)
    }

    fn models_dir(&self, models: &Option<PathBuf>) -> PathBuf {
        models.clone().unwrap_or_else(|| self.out.clone())
    }
}

fn io_error(e: std::io::Error, what: &str, path: &Path) -> sdp_core::Error {
    sdp_core::Error::Io(std::io::Error::new(e.kind(), format!("{what} {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    Ok(std::fs::write(path, bytes).map_err(|e| io_error(e, "cannot write", path))?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| io_error(e, "cannot read config file", p))?),
        None => None,
    };
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(RunConfig::load(text.as_deref(), &overrides)?)
}

fn configure_threads() -> Result<()> {
    let n = match std::env::var("SDP_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            sdp_core::Error::InvalidValue { key: "SDP_THREADS".into(), value: v.clone(), reason: "expected a non-negative integer".into() }
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot start the worker pool")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<sdp_core::Error>().map_or("error", |c| c.code());
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": {"kind": code, "message": chain.join(": ")}}));
            ExitCode::from(match code {
                "config" => 2,
                "missing_checkpoint" | "io" => 3,
                "format" | "kind_mismatch" => 4,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    let ctx = Ctx { cfg, out: cli.common.out.clone(), quiet: cli.common.quiet };
    match cli.command {
        Command::Collect => cmd_collect(&ctx),
        Command::Train { model, data } => cmd_train(&ctx, &model, data),
        Command::Plan { mode, models, episode, target, snapshot_every } => {
            cmd_plan(&ctx, mode, &ctx.models_dir(&models), episode, target, snapshot_every)
        }
        Command::Eval { mode, models } => cmd_eval(&ctx, mode.unwrap_or(ctx.cfg.plan.mode), &ctx.models_dir(&models)),
        Command::Ablate { mode, models, grid } => cmd_ablate(&ctx, mode, &ctx.models_dir(&models), &grid),
        Command::CompareSafety { models } => cmd_compare(&ctx, &ctx.models_dir(&models)),
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

fn cmd_collect(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let ds = collect(&ctx.cfg)?;
    let path = ctx.dir("")?.join("dataset.sdpd");
    ds.write(&path)?;
    ctx.note(format!("wrote {} ({} transitions, {:.1}s)", path.display(), ds.len(), start.elapsed().as_secs_f64()));
    ctx.print(serde_json::to_string_pretty(&ds.summary())?);
    Ok(())
}

fn cmd_train(ctx: &Ctx, model: &str, data: Option<PathBuf>) -> Result<()> {
    let path = data.unwrap_or_else(|| ctx.out.join("dataset.sdpd"));
    if !path.exists() {
        anyhow::bail!(sdp_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset not found: {} (run `sdp collect` first)", path.display())
        )));
    }
    let ds = Dataset::read(&path)?;
    let prepared = TrainingData::prepare(&ds, &ctx.cfg)?;
    let kinds: Vec<ModelKind> = match model {
        "all" => ModelKind::ALL.to_vec(),
        m => vec![m.parse().map_err(anyhow::Error::msg)?],
    };
    let dir = ctx.dir("")?;
    for kind in kinds {
        let start = Instant::now();
        let outcome = train_model(kind, &prepared, &ctx.cfg, &mut |p| {
            ctx.note(format!("{kind} step {:>6} train {:.5} held-out {:.5}", p.step, p.train_loss, p.heldout_loss))
        })?;
        let metrics = heldout_metrics(&outcome.net, &prepared, &ctx.cfg)?;
        write(&dir.join(kind.file_name()), outcome.encode()?)?;
        write_json(
            &dir.join(format!("train_{kind}.json")),
            &json!({
                "model_kind": kind,
                "dataset": path.file_name().map(|f| f.to_string_lossy().to_string()),
                "parameters": outcome.net.num_params(),
                "curve": outcome.curve,
                "heldout_k1": metrics,
                "config": ctx.cfg.to_json(),
            }),
        )?;
        ctx.note(format!("{kind}: {} steps in {:.1}s", outcome.steps, start.elapsed().as_secs_f64()));
        ctx.print(serde_json::to_string(&metrics)?);
    }
    Ok(())
}

fn load_models(ctx: &Ctx, dir: &Path, mode: GuideMode) -> Result<ModelSet> {
    let models = ModelSet::load(dir, mode)?;
    if models.horizon() != ctx.cfg.plan.horizon {
        anyhow::bail!(sdp_core::Error::Config(format!(
            "plan.horizon = {} but the checkpoints were trained with horizon {}",
            ctx.cfg.plan.horizon,
            models.horizon()
        )));
    }
    Ok(models)
}

fn episode_lines(outcomes: &[EpisodeOutcome]) -> String {
    eval::log_lines(outcomes)
}

fn cmd_plan(
    ctx: &Ctx,
    mode: GuideMode,
    models_dir: &Path,
    episode: usize,
    target: Option<[f64; 2]>,
    snapshot_every: usize,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let models = load_models(ctx, models_dir, mode)?;
    let guide = eval::guide_for(cfg, mode);
    let planner = models.planner(cfg, guide);
    planner.check()?;
    let id = EpisodeId { seed: cfg.seed, episode };
    let mut env = eval::reset_env(cfg, id, &eval::reset_options(cfg, cfg.eval.targets))?;
    if let Some(t) = target {
        env = ArmEnv::new(cfg.env, cfg.cbf.safe_set(), cfg.cbf.params(), env.joint(), t);
    }
    let plan_seed = seed::derive(id.seed, &[seed::tag::EVAL, id.episode as u64]);
    let mut policy = RecedingHorizon::new(planner, plan_seed);
    let start = Instant::now();
    let outcome = eval::run_in_env(cfg, id, env, &mut policy as &mut dyn Policy)?;
    let dir = ctx.dir("plan")?;
    let outcomes = [outcome];
    let outcome = &outcomes[0];
    write(&dir.join("episode.jsonl"), episode_lines(&outcomes))?;
    write(&dir.join("trajectory.csv"), export::trajectory_csv(&outcome.records, &cfg.env)?)?;
    let snaps = dir.join("snapshots");
    if snaps.exists() {
        std::fs::remove_dir_all(&snaps)?;
    }
    std::fs::create_dir_all(&snaps)?;
    let safe = cfg.cbf.safe_set();
    let mut frames: Vec<(usize, sdp_core::env::State)> = Vec::new();
    if let Some(first) = outcome.records.first() {
        frames.push((0, sdp_core::env::State(first.s)));
    }
    for r in &outcome.records {
        let t = r.t + 1;
        if (snapshot_every > 0 && t % snapshot_every == 0) || t == outcome.steps {
            frames.push((t, sdp_core::env::State(r.s_next)));
        }
    }
    for (t, s) in &frames {
        let caption = format!("t={t} mode={mode}");
        write(&snaps.join(format!("step_{t:03}.svg")), export::snapshot_svg(s, &cfg.env, &safe, &caption))?;
    }
    let summary = json!({
        "mode": mode,
        "episode": id,
        "target": outcome.target,
        "success": outcome.success,
        "steps": outcome.steps,
        "total_reward": outcome.total_reward,
        "unsafe_steps": outcome.unsafe_steps,
        "label_violations": outcome.label_violations,
        "min_h": outcome.min_h,
        "snapshots": frames.len(),
        "config": cfg.to_json(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    ctx.note(format!("plan: {} steps in {:.1}s, artifacts in {}", outcome.steps, start.elapsed().as_secs_f64(), dir.display()));
    ctx.print(serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(ctx: &Ctx, mode: GuideMode, models_dir: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let models = load_models(ctx, models_dir, mode)?;
    let start = Instant::now();
    let (report, outcomes) = eval::evaluate(cfg, &models, eval::guide_for(cfg, mode))?;
    let dir = ctx.dir("eval")?;
    write(&dir.join("episodes.jsonl"), episode_lines(&outcomes))?;
    let doc = json!({"mode": mode, "targets": cfg.eval.targets, "report": report, "config": cfg.to_json()});
    write_json(&dir.join("report.json"), &doc)?;
    write(&dir.join("table.txt"), eval::ablation_table(&[(cfg.plan.eta1, report.clone())]))?;
    ctx.note(format!("eval: {} episodes in {:.1}s", report.episodes, start.elapsed().as_secs_f64()));
    ctx.print(eval::ablation_table(&[(cfg.plan.eta1, report)]));
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, mode: GuideMode, models_dir: &Path, grid: &[f64]) -> Result<()> {
    let cfg = &ctx.cfg;
    let models = load_models(ctx, models_dir, mode)?;
    let start = Instant::now();
    let rows = eval::ablate(cfg, &models, mode, grid)?;
    let table = eval::ablation_table(&rows);
    let dir = ctx.dir("ablate")?;
    write(&dir.join("table.txt"), &table)?;
    let reports: Vec<_> = rows.iter().map(|(eta, r)| json!({"eta1": eta, "report": r})).collect();
    write_json(&dir.join("report.json"), &json!({"mode": mode, "rows": reports, "config": cfg.to_json()}))?;
    ctx.note(format!("ablate: {} settings in {:.1}s", rows.len(), start.elapsed().as_secs_f64()));
    ctx.print(table.trim_end());
    Ok(())
}

fn cmd_compare(ctx: &Ctx, models_dir: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let models = load_models(ctx, models_dir, GuideMode::Combined)?;
    let start = Instant::now();
    let (cmp, value, combined) = eval::compare_safety(cfg, &models)?;
    let dir = ctx.dir("compare_safety")?;
    write(&dir.join("value.jsonl"), episode_lines(&value))?;
    write(&dir.join("combined.jsonl"), episode_lines(&combined))?;
    write_json(&dir.join("report.json"), &json!({"targets": EvalTargets::NearUnsafe, "comparison": cmp, "config": cfg.to_json()}))?;
    ctx.note(format!("compare-safety: {} paired episodes in {:.1}s", cmp.episodes.len(), start.elapsed().as_secs_f64()));
    ctx.print(serde_json::to_string_pretty(&json!({
        "value_unsafe_steps": cmp.value_unsafe_total,
        "combined_unsafe_steps": cmp.combined_unsafe_total,
        "reduction": cmp.reduction,
        "max_deep_fraction_inside_targets": cmp.max_deep_fraction_inside_targets,
        "value_success_rate": cmp.value_report.success_rate,
        "combined_success_rate": cmp.combined_report.success_rate,
    }))?);
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| io_error(e, "cannot read", path))?;
    let doc = match bytes.get(0..4) {
        Some(b"SDPD") => Dataset::decode(&bytes)?.summary(),
        Some(b"SDPM") => {
            let ck = sdp_nn::decode_checkpoint(&bytes)?;
            let meta: ModelMeta = serde_json::from_value(ck.manifest.meta.clone())
                .map_err(|e| sdp_core::Error::Format(format!("checkpoint metadata: {e}")))?;
            json!({
                "format": "sdpm",
                "model_kind": meta.model_kind,
                "step": ck.manifest.step,
                "optimizer": ck.manifest.optimizer,
                "parameters": ck.params.num_scalars(),
                "tensors": ck.manifest.params,
                "meta": ck.manifest.meta,
            })
        }
        _ => anyhow::bail!(sdp_core::Error::Format(format!("{} is neither a dataset nor a checkpoint", path.display()))),
    };
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
