use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum CmgpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: file contains no data rows")]
    EmptyFile { path: PathBuf },

    #[error("non-finite value for subject {subject}: {message}")]
    NonFinite { subject: usize, message: String },

    #[error("treatment arm {arm} is empty")]
    EmptyArm { arm: u8 },

    #[error("cholesky factorization failed after jitter {jitter:e} (min diagonal estimate {min_eigenvalue:e})")]
    Factorization { jitter: f64, min_eigenvalue: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CmgpError>;
