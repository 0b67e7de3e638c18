//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The explicit scheme would be unstable at the requested resolution.
    #[error(
        "CFL condition violated: dt*max|f'|/dx = {ratio:.4} > {limit}; \
         increase time resolution to at least N_t = {suggested_n_t}"
    )]
    CflViolation {
        ratio: f64,
        limit: f64,
        suggested_n_t: usize,
    },

    /// Array or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that needs at least one element received none.
    #[error("empty set: {0}")]
    Empty(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
