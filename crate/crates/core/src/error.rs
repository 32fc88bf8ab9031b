use thiserror::Error;

use crate::diff::Op;
use crate::discretize::Discretization;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside schedule domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("log-SNR {lambda} outside [{lo}, {hi}]")]
    LambdaDomain { lambda: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("solver diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite value in backward pass at tape node {index} ({op:?})")]
    Gradient { index: usize, op: Op },

    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: usize,
        last_good: Option<Box<Discretization>>,
    },

    #[error("singular Jacobian (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
