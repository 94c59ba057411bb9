//! Error types shared across the library.

use std::path::PathBuf;
use thiserror::Error;

/// Errors raised by image I/O, loss evaluation, fusion, and the batch pipeline.
#[derive(Debug, Error)]
pub enum FusionError {
    /// Input could not be read or has an unsupported format.
    #[error("input error: {path}: {reason}")]
    Input { path: PathBuf, reason: String },

    /// Output could not be written.
    #[error("output error: {path}: {reason}")]
    Output { path: PathBuf, reason: String },

    /// Image dimensions are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Manifest or configuration failed validation.
    #[error("invalid input: {0}")]
    Validation(String),

    /// The optimizer produced a non-finite loss or gradient.
    #[error("numerical divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
}

impl FusionError {
    /// Process exit code for this error per the CLI contract:
    /// 2 input/validation, 3 I/O, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            FusionError::Input { .. } | FusionError::Dimension(_) | FusionError::Validation(_) => 2,
            FusionError::Output { .. } => 3,
            FusionError::Divergence { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;
