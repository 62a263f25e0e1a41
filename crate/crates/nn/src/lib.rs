//! Minimal differentiable-computation kernel.
//!
//! The kernel is deliberately narrow: it records a tape of the handful of
//! layer operations the planner's networks need (dense and temporal
//! convolution layers, layer normalization, Mish, a few reductions and
//! losses) and replays it backwards to obtain exact reverse-mode gradients
//! with respect to parameters and inputs.
//!
//! Everything is generic over [`Real`] so the same network code runs in
//! `f32` for training and planning and in `f64` for finite-difference
//! gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointManifest,
};
pub use gradcheck::{central_difference, relative_error, GradCheckReport};
pub use graph::{mish_scalar, Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("node {0} was never recorded on this graph (backward before forward)")]
    UnknownNode(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParameter(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
