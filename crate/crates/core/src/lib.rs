//! Individualized treatment effect estimation with causal multi-task
//! Gaussian processes.
//!
//! A single vector-valued GP models both potential outcomes of each subject;
//! its hyperparameters are fitted by minimizing a risk-based empirical-Bayes
//! objective (factual LOO error plus counterfactual posterior variance).

pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod rng;

pub use error::{CmgpError, Result};
