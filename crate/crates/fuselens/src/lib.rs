//! Semantic-aware fusion of registered CT/MR image pairs.
//!
//! The library provides:
//! - patch-level losses (semantic, MEF-SSIM, reconstruction) with analytic
//!   gradients ([`losses`]),
//! - fusion quality indices (SSIM, Q_MI, Q_ABF, semantic loss) ([`metrics`]),
//! - fusers: pixel-space variational optimization of the composite loss,
//!   plus averaging and Laplacian-pyramid baselines ([`fuse`]),
//! - a synthetic CT/MR phantom generator ([`phantom`]) and the batch
//!   pipeline behind the `fuselens` binary ([`commands`]).

pub mod commands;
pub mod error;
pub mod fuse;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod phantom;
pub mod report;

pub use error::{FusionError, Result};
