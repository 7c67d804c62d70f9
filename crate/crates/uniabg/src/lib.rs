//! Desk-scale dual-stage unsupervised cross-view geo-localization.
//!
//! The pipeline matches drone imagery against a satellite gallery without
//! ground-truth pairs. Stage 1 learns view-invariant embeddings with
//! clustering-based contrastive losses plus an adversarial view discriminator
//! that pulls all views toward an auxiliary pseudo view (a color-transferred
//! drone image). Stage 2 purifies drone-satellite correspondences with
//! heterogeneous graph filtering and trains on the surviving pairs.
//!
//! Every mechanism runs on CPU with analytic gradients and a synthetic
//! benchmark generator, so the whole thing is verifiable without GPUs or the
//! original datasets. See the `examples/` directory for one runnable example
//! per capability.

pub mod apv;
pub mod ckpt;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod hgfc;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod store;
pub mod synth;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
