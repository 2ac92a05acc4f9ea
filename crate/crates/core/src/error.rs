use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    /// Euler–Maruyama state left the admissible region.
    #[error("SDE blow-up at step {step}: state norm {norm:e}")]
    Blowup { step: usize, norm: f64 },

    #[error("series is not mean reverting (AR coefficient {0})")]
    NotMeanReverting(f64),

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
