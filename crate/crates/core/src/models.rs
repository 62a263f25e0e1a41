//! The three step-conditioned networks: trajectory denoiser, value guide
//! and safety classifier guide.
//!
//! All share one backbone over an `H × 10` trajectory plus the diffusion
//! step `k`. The convolutional backbone is a stack of residual temporal
//! blocks whose widths rise then fall (`c, 2c, c` for three blocks); each
//! block applies two same-padded convolutions with layer normalization and
//! Mish, adds a projection of the step embedding after the first, and
//! closes with a 1×1 residual projection when widths differ. The MLP
//! backbone flattens the trajectory instead.

use crate::config::{Backbone, ModelConfig};
use crate::env::TRANSITION_DIM;
use crate::{Error, Result};
use rand::Rng;
use sdp_nn::init::{constant, fan_in_uniform};
use sdp_nn::{Checkpoint, Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dynamics,
    Value,
    Safety,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Dynamics, ModelKind::Value, ModelKind::Safety];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dynamics => "dynamics",
            ModelKind::Value => "value",
            ModelKind::Safety => "safety",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.sdpm", self.as_str())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dynamics" => Ok(ModelKind::Dynamics),
            "value" => Ok(ModelKind::Value),
            "safety" => Ok(ModelKind::Safety),
            _ => Err(format!("unknown model `{s}`, expected dynamics, value or safety")),
        }
    }
}

/// Sinusoidal encoding of the diffusion step.
pub fn sinusoidal_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let denom = (half.max(2) - 1) as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / denom).exp();
        let a = k as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Dense,
    norm1: Norm,
    step: Dense,
    conv2: Dense,
    norm2: Norm,
    residual: Option<Dense>,
}

#[derive(Debug, Clone)]
struct MlpLayer {
    dense: Dense,
    norm: Norm,
}

#[derive(Debug, Clone)]
enum Body {
    Conv(Vec<ConvBlock>),
    Mlp { input: Dense, step: Dense, norm: Norm, layers: Vec<MlpLayer> },
}

#[derive(Debug, Clone)]
struct Layout {
    embed1: Dense,
    embed2: Dense,
    body: Body,
    head: Dense,
}

struct Builder<'a, T: Real, R: Rng + ?Sized> {
    store: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn dense(&mut self, name: &str, fan_in: usize, shape: &[usize], out: usize) -> Dense {
        let n: usize = shape.iter().product();
        let w = self.store.add(format!("{name}.w"), shape, fan_in_uniform(self.rng, fan_in, n));
        let b = self.store.add(format!("{name}.b"), &[out], fan_in_uniform(self.rng, fan_in, out));
        Dense { w, b }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Dense {
        self.dense(name, i, &[i, o], o)
    }

    fn conv(&mut self, name: &str, kernel: usize, i: usize, o: usize) -> Dense {
        self.dense(name, kernel * i, &[kernel, i, o], o)
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gain = self.store.add(format!("{name}.gain"), &[c], constant(1.0, c));
        let bias = self.store.add(format!("{name}.bias"), &[c], constant(0.0, c));
        Norm { gain, bias }
    }
}

/// Block widths `c·2^min(i, n−1−i)`.
pub fn block_widths(cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.blocks).map(|i| cfg.channels << i.min(cfg.blocks - 1 - i)).collect()
}

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub kind: ModelKind,
    pub arch: ModelConfig,
    pub horizon: usize,
    /// Value head affine map from the raw network output to reward units.
    pub value_offset: f64,
    pub value_scale: f64,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, arch: ModelConfig, horizon: usize, rng: &mut R) -> Self {
        let mut b = Builder { store: ParamStore::new(), rng };
        let e = arch.embed_dim;
        let embed1 = b.linear("embed.0", e, 2 * e);
        let embed2 = b.linear("embed.1", 2 * e, e);
        let (body, last) = match arch.backbone {
            Backbone::Conv => {
                let widths = block_widths(&arch);
                let mut cin = TRANSITION_DIM;
                let mut blocks = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    let p = format!("block{i}");
                    blocks.push(ConvBlock {
                        conv1: b.conv(&format!("{p}.conv1"), arch.kernel, cin, w),
                        norm1: b.norm(&format!("{p}.norm1"), w),
                        step: b.linear(&format!("{p}.step"), e, w),
                        conv2: b.conv(&format!("{p}.conv2"), arch.kernel, w, w),
                        norm2: b.norm(&format!("{p}.norm2"), w),
                        residual: (cin != w).then(|| b.conv(&format!("{p}.residual"), 1, cin, w)),
                    });
                    cin = w;
                }
                (Body::Conv(blocks), cin)
            }
            Backbone::Mlp => {
                let hd = arch.hidden;
                let input = b.linear("mlp.input", horizon * TRANSITION_DIM, hd);
                let step = b.linear("mlp.step", e, hd);
                let norm = b.norm("mlp.norm", hd);
                let layers = (1..arch.blocks)
                    .map(|i| MlpLayer {
                        dense: b.linear(&format!("mlp.layer{i}"), hd, hd),
                        norm: b.norm(&format!("mlp.layer{i}.norm"), hd),
                    })
                    .collect();
                (Body::Mlp { input, step, norm, layers }, hd)
            }
        };
        let head = match (kind, arch.backbone) {
            (ModelKind::Dynamics, Backbone::Conv) => b.conv("head", 1, last, TRANSITION_DIM),
            (ModelKind::Dynamics, Backbone::Mlp) => b.linear("head", last, horizon * TRANSITION_DIM),
            (ModelKind::Value, Backbone::Conv) => b.linear("head", horizon * last, 1),
            (ModelKind::Value, Backbone::Mlp) => b.linear("head", last, 1),
            (ModelKind::Safety, Backbone::Conv) => b.linear("head", horizon * last, 2 * horizon),
            (ModelKind::Safety, Backbone::Mlp) => b.linear("head", last, 2 * horizon),
        };
        let layout = Layout { embed1, embed2, body, head };
        Self { kind, arch, horizon, value_offset: 0.0, value_scale: 1.0, params: b.store, layout }
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            kind: self.kind,
            arch: self.arch,
            horizon: self.horizon,
            value_offset: self.value_offset,
            value_scale: self.value_scale,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn embed(&self, g: &mut Graph<'_, T>, ks: &[usize]) -> Result<NodeId> {
        let e = self.arch.embed_dim;
        let raw: Vec<f64> = ks.iter().flat_map(|&k| sinusoidal_embedding(k, e)).collect();
        let x = g.constant(Tensor::from_f64(&[ks.len(), e], &raw)?);
        let h = g.affine(x, self.layout.embed1.w, Some(self.layout.embed1.b))?;
        let h = g.mish(h)?;
        let h = g.affine(h, self.layout.embed2.w, Some(self.layout.embed2.b))?;
        Ok(g.mish(h)?)
    }

    /// Records the forward pass for a batch `x: [B, H, 10]` at steps `ks`.
    ///
    /// Output shapes: dynamics `[B, H, 10]`, value `[B]` in reward units,
    /// safety `[B, H, 2]` logits (class 0 = safe).
    pub fn forward(&self, g: &mut Graph<'_, T>, x: NodeId, ks: &[usize]) -> Result<NodeId> {
        let shape = g.value(x)?.shape().to_vec();
        if shape != [ks.len(), self.horizon, TRANSITION_DIM] {
            return Err(Error::Invalid(format!(
                "{} network expects input [{}, {}, {}], got {:?}",
                self.kind,
                ks.len(),
                self.horizon,
                TRANSITION_DIM,
                shape
            )));
        }
        let bsz = ks.len();
        let emb = self.embed(g, ks)?;
        let h = match &self.layout.body {
            Body::Conv(blocks) => {
                let mut h = x;
                for blk in blocks {
                    let y = g.conv1d(h, blk.conv1.w, blk.conv1.b)?;
                    let y = g.layer_norm(y, blk.norm1.gain, blk.norm1.bias)?;
                    let y = g.mish(y)?;
                    let se = g.affine(emb, blk.step.w, Some(blk.step.b))?;
                    let y = g.add_time(y, se)?;
                    let y = g.conv1d(y, blk.conv2.w, blk.conv2.b)?;
                    let y = g.layer_norm(y, blk.norm2.gain, blk.norm2.bias)?;
                    let y = g.mish(y)?;
                    let skip = match &blk.residual {
                        Some(r) => g.conv1d(h, r.w, r.b)?,
                        None => h,
                    };
                    h = g.add(y, skip)?;
                }
                h
            }
            Body::Mlp { input, step, norm, layers } => {
                let flat = g.reshape(x, &[bsz, self.horizon * TRANSITION_DIM])?;
                let a = g.affine(flat, input.w, Some(input.b))?;
                let s = g.affine(emb, step.w, Some(step.b))?;
                let h = g.add(a, s)?;
                let h = g.layer_norm(h, norm.gain, norm.bias)?;
                let mut h = g.mish(h)?;
                for l in layers {
                    let y = g.affine(h, l.dense.w, Some(l.dense.b))?;
                    let y = g.layer_norm(y, l.norm.gain, l.norm.bias)?;
                    let y = g.mish(y)?;
                    h = g.add(y, h)?;
                }
                h
            }
        };
        let head = &self.layout.head;
        let conv = matches!(self.layout.body, Body::Conv(_));
        Ok(match self.kind {
            ModelKind::Dynamics if conv => g.conv1d(h, head.w, head.b)?,
            ModelKind::Dynamics => {
                let y = g.affine(h, head.w, Some(head.b))?;
                g.reshape(y, &[bsz, self.horizon, TRANSITION_DIM])?
            }
            ModelKind::Value => {
                let flat = self.flatten(g, h, bsz)?;
                let y = g.affine(flat, head.w, Some(head.b))?;
                let y = g.reshape(y, &[bsz])?;
                g.scale_shift(y, self.value_scale, self.value_offset)?
            }
            ModelKind::Safety => {
                let flat = self.flatten(g, h, bsz)?;
                let y = g.affine(flat, head.w, Some(head.b))?;
                g.reshape(y, &[bsz, self.horizon, 2])?
            }
        })
    }

    fn flatten(&self, g: &mut Graph<'_, T>, h: NodeId, bsz: usize) -> Result<NodeId> {
        let n = g.value(h)?.numel() / bsz;
        Ok(g.reshape(h, &[bsz, n])?)
    }

    /// Forward pass without gradients; returns the flattened output.
    pub fn predict(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(&self.params);
        let xi = g.constant(Tensor::from_f64(&[ks.len(), self.horizon, TRANSITION_DIM], x)?);
        let y = self.forward(&mut g, xi, ks)?;
        Ok(g.value(y)?.to_f64_vec())
    }

    /// Scalar objective whose input gradient drives guidance: the value
    /// for the value guide, `Σ_t log p(safe_t)` for the safety guide.
    fn guide_objective(&self, g: &mut Graph<'_, T>, x: NodeId, ks: &[usize]) -> Result<NodeId> {
        let y = self.forward(g, x, ks)?;
        match self.kind {
            ModelKind::Value => Ok(y),
            ModelKind::Safety => {
                let lp = g.log_softmax(y)?;
                Ok(g.select_sum(lp, 0)?)
            }
            ModelKind::Dynamics => Err(Error::Invalid("the dynamics model is not a guide".into())),
        }
    }

    /// Per-sample guide objective and its gradient with respect to the
    /// whole input trajectory.
    pub fn guide_value_and_grad(&self, x: &[f64], ks: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::frozen(&self.params);
        let xi = g.input(Tensor::from_f64(&[ks.len(), self.horizon, TRANSITION_DIM], x)?, true);
        let obj = self.guide_objective(&mut g, xi, ks)?;
        let total = g.sum(obj)?;
        let grads = g.backward(total)?;
        let values = g.value(obj)?.to_f64_vec();
        let grad = grads.node(xi).map(|d| d.iter().map(|v| v.f64()).collect()).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((values, grad))
    }

    /// Per-sample guide objective only.
    pub fn guide_value(&self, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(&self.params);
        let xi = g.constant(Tensor::from_f64(&[ks.len(), self.horizon, TRANSITION_DIM], x)?);
        let obj = self.guide_objective(&mut g, xi, ks)?;
        Ok(g.value(obj)?.to_f64_vec())
    }
}

/// Checkpoint metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_kind: ModelKind,
    pub arch: ModelConfig,
    pub horizon: usize,
    pub value_offset: f64,
    pub value_scale: f64,
    pub normalizer: crate::dataset::Normalizer,
    pub diffusion: crate::config::DiffusionConfig,
    pub config: serde_json::Value,
    pub final_heldout_loss: Option<f64>,
}

impl Network<f32> {
    /// Rebuilds a network from a checkpoint, checking its kind and layout.
    pub fn from_checkpoint(ck: &Checkpoint, expected: ModelKind) -> Result<(Self, ModelMeta)> {
        let meta: ModelMeta = serde_json::from_value(ck.manifest.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.model_kind != expected {
            return Err(Error::KindMismatch { expected: expected.to_string(), found: meta.model_kind.to_string() });
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::<f32>::new(meta.model_kind, meta.arch, meta.horizon, &mut rng);
        if net.params.len() != ck.params.len() {
            return Err(Error::Format("checkpoint parameter count does not match its architecture".into()));
        }
        for (dst, src) in net.params.iter_mut().zip(ck.params.iter()) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Format(format!("checkpoint parameter `{}` does not match `{}`", src.name, dst.name)));
            }
            dst.value.clone_from(&src.value);
        }
        net.value_offset = meta.value_offset;
        net.value_scale = meta.value_scale;
        Ok((net, meta))
    }
}
