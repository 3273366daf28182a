//! Probing frozen denoiser features for physical-plausibility signals and
//! pruning parallel sampling trajectories with a small causal verifier.
//!
//! The crate is organised bottom-up:
//!
//! - [`worldgen`]: labeled point-mass "videos" rendered by several
//!   pseudo-generators.
//! - [`diffusion`]: noise schedule, a small transformer denoiser with
//!   hidden-state capture, and a deterministic DDIM sampler.
//! - [`features`]: noising, capture, conditioning-token removal and pooling,
//!   plus the on-disk feature cache.
//! - [`probing`]: logistic probes, AUC, cross-validation and control analyses.
//! - [`verifier`]: the causal-attention plausibility verifier and its trainer.
//! - [`selection`]: progressive trajectory pruning, baselines and cost
//!   accounting, with strategies and scorers looked up by name.
//! - [`pipeline`]: the staged experiment driven by an [`config::ExperimentConfig`].

pub mod binio;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod probing;
pub mod report;
pub mod rng;
pub mod selection;
pub mod verifier;
pub mod worldgen;

pub use error::{Error, Result};
