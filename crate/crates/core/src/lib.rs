//! Safe diffusion planning for a planar two-link arm.
//!
//! The crate covers the whole pipeline: the simulated manipulator and its
//! barrier-function safety labels, offline dataset collection, the DDPM
//! noise schedule and losses, the three networks (trajectory denoiser,
//! value guide, safety classifier guide), guided receding-horizon planning
//! and the evaluation harness.

pub mod bundle;
pub mod cbf;
pub mod config;
pub mod env;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod models;
pub mod planner;
pub mod seed;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
