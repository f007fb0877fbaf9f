//! Core library for continual generalized category discovery.
//!
//! The pipeline trains a small embedding network with proxy-anchor and
//! EVT-based losses, fits per-proxy Weibull tail distributions to obtain an
//! open-set classifier, discovers novel categories in unlabeled batches via
//! affinity propagation, and prunes redundant discovered proxies with a
//! greedy set cover driven by the same Weibull inclusion probabilities.
//!
//! Batch-level inner loops (embedding, pairwise similarities, Weibull
//! fitting, classification) run on rayon when the `parallel` feature is
//! enabled (the default) and fall back to equivalent sequential loops
//! otherwise.

pub mod clustering;
pub mod embedding;
pub mod evt;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod reduction;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by primitive `{op}`")]
    NonFinite { op: &'static str },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate tail: all tail values identical, Weibull shape is unbounded")]
    DegenerateTail,

    #[error("tail too small: need at least 2 positive values, got {0}")]
    TailTooSmall(usize),

    #[error("no opposite-class samples available for proxy of class {class_id}")]
    NoOppositeClassSamples { class_id: usize },

    #[error("proxy {proxy_index} has no fitted Weibull parameters")]
    MissingWeibull { proxy_index: usize },

    #[error("batch label {0} has no matching proxy")]
    LabelWithoutProxy(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format `{found}` is not supported (expected `{expected}`)")]
    CheckpointVersion { found: String, expected: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
