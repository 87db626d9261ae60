//! Hierarchical semantics-guided video prediction at desk scale.
//!
//! The pipeline: a deterministic synthetic shape world ([`synthworld`]), a
//! frozen multi-depth patch encoder with PCA projection ([`features`]), a
//! lossless space-to-depth latent codec ([`codec`]), a masked feature
//! forecaster ([`stage1`]), a semantics-guided diffusion transformer
//! ([`stage2`]), and the metric suite ([`evalsuite`]). Orchestration lives in
//! the `semvid` CLI crate.

pub mod artifact;
pub mod codec;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod synthworld;

pub use error::{Error, Result};
