//! Training loops for the three networks and held-out evaluation metrics.
//!
//! Every model sees the same corruption: a window `τ⁰`, a step
//! `k ~ U{1..K}` and Gaussian noise give `τ^k = √ᾱ_k τ⁰ + √(1−ᾱ_k) ε`, with
//! the first state row then overwritten by its clean value exactly as the
//! planner's inpainting does. The denoiser regresses `τ⁰` (signal mode) or
//! `ε` (epsilon mode), the value guide regresses the window's discounted
//! return and the safety guide classifies each step's label.

use crate::config::{PredictionMode, RunConfig};
use crate::dataset::{split_episodes, windows, Dataset, Normalizer, WindowSample};
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::env::{STATE_DIM, TRANSITION_DIM};
use crate::models::{ModelKind, ModelMeta, Network};
use crate::{seed, Error, Result};
use rand::Rng;
use sdp_nn::{encode_checkpoint, AdamW, AdamWConfig, Graph, NodeId, Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

/// Windows split into training and held-out episodes, plus the statistics
/// the networks are conditioned on.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub normalizer: Normalizer,
    pub train: Vec<WindowSample>,
    pub heldout: Vec<WindowSample>,
    pub value_mean: f64,
    pub value_std: f64,
}

impl TrainingData {
    pub fn prepare(ds: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let normalizer = Normalizer::fit(ds)?;
        let h = cfg.plan.horizon;
        let (tr, ho) = split_episodes(ds.episodes, cfg.train.holdout_frac);
        let train = windows(ds, &normalizer, tr, h, cfg.diff.gamma);
        let heldout = windows(ds, &normalizer, ho, h, cfg.diff.gamma);
        if train.is_empty() {
            return Err(Error::Invalid(format!(
                "no training windows: horizon {h} exceeds the episode length {}",
                ds.steps
            )));
        }
        let n = train.len() as f64;
        let value_mean = train.iter().map(|w| w.value_target).sum::<f64>() / n;
        let var = train.iter().map(|w| (w.value_target - value_mean).powi(2)).sum::<f64>() / n;
        Ok(Self { normalizer, train, heldout, value_mean, value_std: var.sqrt().max(1e-6) })
    }
}

/// One corrupted minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub ks: Vec<usize>,
    pub x0: Vec<f64>,
    pub noise: Vec<f64>,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }
}

/// Noises the windows at the given steps and pins each first state row.
pub fn build_batch(windows: &[&WindowSample], ks: &[usize], noise: Vec<f64>, schedule: &NoiseSchedule) -> Batch {
    let row = windows.first().map_or(0, |w| w.traj.len());
    let mut x = Vec::with_capacity(windows.len() * row);
    let mut x0 = Vec::with_capacity(windows.len() * row);
    for (i, (w, &k)) in windows.iter().zip(ks).enumerate() {
        let mut xk = schedule.q_sample(&w.traj, k, &noise[i * row..(i + 1) * row]).expect("matching lengths");
        xk[..STATE_DIM].copy_from_slice(&w.traj[..STATE_DIM]);
        x.extend_from_slice(&xk);
        x0.extend_from_slice(&w.traj);
    }
    Batch {
        x,
        ks: ks.to_vec(),
        x0,
        noise,
        values: windows.iter().map(|w| w.value_target).collect(),
        labels: windows.iter().flat_map(|w| w.labels.iter().map(|&c| c as usize)).collect(),
    }
}

pub fn random_batch<R: Rng + ?Sized>(
    data: &[WindowSample],
    size: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Batch {
    let picks: Vec<&WindowSample> = (0..size).map(|_| &data[rng.random_range(0..data.len())]).collect();
    let ks: Vec<usize> = (0..size).map(|_| rng.random_range(1..=schedule.k)).collect();
    let row = picks[0].traj.len();
    let noise = standard_normal(rng, size * row);
    build_batch(&picks, &ks, noise, schedule)
}

/// Records the training objective of `net` on `batch`.
pub fn loss_node<T: Real>(
    net: &Network<T>,
    g: &mut Graph<'_, T>,
    batch: &Batch,
    mode: PredictionMode,
) -> Result<NodeId> {
    let shape = [batch.len(), net.horizon, TRANSITION_DIM];
    let x = g.constant(Tensor::from_f64(&shape, &batch.x)?);
    let y = net.forward(g, x, &batch.ks)?;
    let of = |v: &[f64]| v.iter().map(|&a| T::of(a)).collect::<Vec<T>>();
    Ok(match net.kind {
        ModelKind::Dynamics => {
            let target = match mode {
                PredictionMode::Signal => of(&batch.x0),
                PredictionMode::Epsilon => of(&batch.noise),
            };
            g.mse(y, &target)?
        }
        ModelKind::Value => {
            let (off, sc) = (net.value_offset, net.value_scale);
            let z = g.scale_shift(y, 1.0 / sc, -off / sc)?;
            let target: Vec<T> = batch.values.iter().map(|v| T::of((v - off) / sc)).collect();
            g.mse(z, &target)?
        }
        ModelKind::Safety => g.softmax_xent(y, &batch.labels)?,
    })
}

pub fn batch_loss<T: Real>(net: &Network<T>, batch: &Batch, mode: PredictionMode) -> Result<f64> {
    let mut g = Graph::frozen(&net.params);
    let l = loss_node(net, &mut g, batch, mode)?;
    Ok(g.value(l)?.data()[0].f64())
}

/// Fixed held-out evaluation set: windows, steps and noise drawn once.
pub fn heldout_batch(data: &TrainingData, cfg: &RunConfig, schedule: &NoiseSchedule) -> Batch {
    let pool = if data.heldout.is_empty() { &data.train } else { &data.heldout };
    let mut rng = seed::rng(cfg.seed, &[seed::tag::HOLDOUT, cfg.train.seed]);
    random_batch(pool, cfg.train.eval_windows, schedule, &mut rng)
}

fn chunked_loss(net: &Network<f32>, batch: &Batch, mode: PredictionMode) -> Result<f64> {
    let chunk = 64;
    let row = batch.x.len() / batch.len().max(1);
    let h = net.horizon;
    let mut total = 0.0;
    for start in (0..batch.len()).step_by(chunk) {
        let end = (start + chunk).min(batch.len());
        let part = Batch {
            x: batch.x[start * row..end * row].to_vec(),
            ks: batch.ks[start..end].to_vec(),
            x0: batch.x0[start * row..end * row].to_vec(),
            noise: batch.noise[start * row..end * row].to_vec(),
            values: batch.values[start..end].to_vec(),
            labels: batch.labels[start * h..end * h].to_vec(),
        };
        total += batch_loss(net, &part, mode)? * (end - start) as f64;
    }
    Ok(total / batch.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    pub meta: ModelMeta,
    pub curve: Vec<CurvePoint>,
    pub optimizer: AdamWConfig,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(encode_checkpoint(&self.net.params, self.optimizer, self.steps as u64, serde_json::to_value(&self.meta)?)?)
    }
}

fn kind_index(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::Dynamics => 0,
        ModelKind::Value => 1,
        ModelKind::Safety => 2,
    }
}

/// Trains one network for `cfg.train.steps` AdamW steps on minibatches of
/// uniformly drawn training windows.
pub fn train_model(
    kind: ModelKind,
    data: &TrainingData,
    cfg: &RunConfig,
    on_point: &mut dyn FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = NoiseSchedule::from_config(&cfg.diff)?;
    let mode = cfg.diff.mode;
    let tag = kind_index(kind);
    let mut init = seed::rng(cfg.seed, &[seed::tag::INIT, cfg.train.seed, tag]);
    let mut net = Network::<f32>::new(kind, cfg.model, cfg.plan.horizon, &mut init);
    if kind == ModelKind::Value {
        net.value_offset = data.value_mean;
        net.value_scale = data.value_std;
    }
    let optimizer = AdamWConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..AdamWConfig::default() };
    let mut adam = AdamW::new(optimizer, &net.params);
    let mut rng = seed::rng(cfg.seed, &[seed::tag::TRAIN, cfg.train.seed, tag]);
    let heldout = heldout_batch(data, cfg, &schedule);
    let mut curve = Vec::new();
    let (mut run_sum, mut run_n) = (0.0, 0usize);
    for step in 1..=cfg.train.steps {
        let batch = random_batch(&data.train, cfg.train.batch, &schedule, &mut rng);
        let grads = {
            let mut g = Graph::new(&net.params);
            let l = loss_node(&net, &mut g, &batch, mode)?;
            let lv = g.value(l)?.data()[0].f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { step, detail: format!("{kind} training loss is {lv}") });
            }
            run_sum += lv;
            run_n += 1;
            g.backward(l)?
        };
        net.params.zero_grad();
        net.params.accumulate(&grads);
        adam.step(&mut net.params).map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let point =
                CurvePoint { step, train_loss: run_sum / run_n as f64, heldout_loss: chunked_loss(&net, &heldout, mode)? };
            if !point.heldout_loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("{kind} held-out loss is non-finite") });
            }
            on_point(&point);
            curve.push(point);
            run_sum = 0.0;
            run_n = 0;
        }
    }
    let meta = ModelMeta {
        model_kind: kind,
        arch: cfg.model,
        horizon: cfg.plan.horizon,
        value_offset: net.value_offset,
        value_scale: net.value_scale,
        normalizer: data.normalizer.clone(),
        diffusion: cfg.diff,
        config: cfg.to_json(),
        final_heldout_loss: curve.last().map(|p| p.heldout_loss),
    };
    Ok(TrainOutcome { net, meta, curve, optimizer, steps: cfg.train.steps })
}

/// Held-out quality at the least-noisy diffusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub model_kind: ModelKind,
    pub windows: usize,
    pub loss_at_k1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub majority_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise_rmse: Option<f64>,
}

/// Scores a trained network on every held-out window corrupted at `k = 1`.
pub fn heldout_metrics(net: &Network<f32>, data: &TrainingData, cfg: &RunConfig) -> Result<HeldoutMetrics> {
    let schedule = NoiseSchedule::from_config(&cfg.diff)?;
    let mut rng = seed::rng(cfg.seed, &[seed::tag::HOLDOUT, 1]);
    let batch = batch_at_step(&data.heldout, 1, &schedule, &mut rng);
    let mut m = HeldoutMetrics {
        model_kind: net.kind,
        windows: batch.len(),
        loss_at_k1: chunked_loss(net, &batch, cfg.diff.mode)?,
        confusion: None,
        accuracy: None,
        majority_baseline: None,
        pearson: None,
        denoise_rmse: None,
    };
    match net.kind {
        ModelKind::Dynamics => m.denoise_rmse = Some(denoise_rmse(net, &batch, &schedule, cfg.diff.mode)?),
        ModelKind::Value => m.pearson = Some(pearson(&value_predictions(net, &batch)?, &batch.values)),
        ModelKind::Safety => {
            let c = safety_confusion(net, &batch)?;
            m.accuracy = Some(c.accuracy());
            m.majority_baseline = Some(c.majority_baseline());
            m.confusion = Some(c);
        }
    }
    Ok(m)
}

/// Step-level confusion counts of the safety classifier (class 1 = unsafe).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_safe: usize,
    pub false_safe: usize,
    pub true_unsafe: usize,
    pub false_unsafe: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_safe + self.false_safe + self.true_unsafe + self.false_unsafe
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_safe + self.true_unsafe) as f64 / self.total().max(1) as f64
    }

    /// Accuracy of always predicting the majority class.
    pub fn majority_baseline(&self) -> f64 {
        let unsafe_n = self.true_unsafe + self.false_safe;
        let safe_n = self.total() - unsafe_n;
        safe_n.max(unsafe_n) as f64 / self.total().max(1) as f64
    }
}

/// Corrupts every window at one fixed step `k`.
pub fn batch_at_step<R: Rng + ?Sized>(
    windows: &[WindowSample],
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Batch {
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let row = refs.first().map_or(0, |w| w.traj.len());
    let noise = standard_normal(rng, refs.len() * row);
    build_batch(&refs, &vec![k; refs.len()], noise, schedule)
}

fn chunks(batch: &Batch) -> impl Iterator<Item = (std::ops::Range<usize>, &Batch)> {
    let n = batch.len();
    (0..n).step_by(64).map(move |s| (s..(s + 64).min(n), batch))
}

pub fn safety_confusion(net: &Network<f32>, batch: &Batch) -> Result<Confusion> {
    let row = batch.x.len() / batch.len().max(1);
    let mut c = Confusion::default();
    for (r, b) in chunks(batch) {
        let logits = net.predict(&b.x[r.start * row..r.end * row], &b.ks[r.clone()])?;
        for (i, pair) in logits.chunks(2).enumerate() {
            let predicted_unsafe = pair[1] > pair[0];
            let actual_unsafe = b.labels[r.start * net.horizon + i] == 1;
            match (predicted_unsafe, actual_unsafe) {
                (false, false) => c.true_safe += 1,
                (false, true) => c.false_safe += 1,
                (true, true) => c.true_unsafe += 1,
                (true, false) => c.false_unsafe += 1,
            }
        }
    }
    Ok(c)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Value predictions for a batch, in reward units.
pub fn value_predictions(net: &Network<f32>, batch: &Batch) -> Result<Vec<f64>> {
    let row = batch.x.len() / batch.len().max(1);
    let mut out = Vec::with_capacity(batch.len());
    for (r, b) in chunks(batch) {
        out.extend(net.predict(&b.x[r.start * row..r.end * row], &b.ks[r])?);
    }
    Ok(out)
}

/// RMSE of the implied clean-signal estimate against the true windows.
pub fn denoise_rmse(net: &Network<f32>, batch: &Batch, schedule: &NoiseSchedule, mode: PredictionMode) -> Result<f64> {
    let row = batch.x.len() / batch.len().max(1);
    let mut se = 0.0;
    for (r, b) in chunks(batch) {
        let xs = &b.x[r.start * row..r.end * row];
        let pred = net.predict(xs, &b.ks[r.clone()])?;
        for (i, j) in r.clone().enumerate() {
            let p = &pred[i * row..(i + 1) * row];
            let x0 = match mode {
                PredictionMode::Signal => p.to_vec(),
                PredictionMode::Epsilon => schedule.x0_from_eps(&xs[i * row..(i + 1) * row], p, b.ks[j]),
            };
            se += x0.iter().zip(&b.x0[j * row..(j + 1) * row]).map(|(a, t)| (a - t).powi(2)).sum::<f64>();
        }
    }
    Ok((se / batch.x.len().max(1) as f64).sqrt())
}
