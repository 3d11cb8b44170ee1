use std::path::PathBuf;

use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("integration blew up at step {step}")]
    BlowUp { step: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite gradient (chain {chain:?}, epoch {epoch:?})")]
    DivergedGradient { chain: Option<usize>, epoch: Option<usize> },

    #[error("pretraining did not reach tolerance, residual {residual:.3e}")]
    PretrainFailed { residual: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("compartment {0} has zero integral and cannot be weighted")]
    DegenerateWeight(String),

    #[error("all {chains} chains failed")]
    EnsembleFailed { chains: usize },

    #[error("parameter {index} = {value} is outside the prior support")]
    OutOfSupport { index: usize, value: f64 },

    #[error("all likelihoods underflow to zero")]
    DegenerateLikelihoods,

    #[error("densities are defined on different grids")]
    GridMismatch,

    #[error("empty evaluation window")]
    EmptyWindow,

    #[error("dataset has a gap before {0}")]
    Gap(String),

    #[error("invalid value in row {row}: {message}")]
    Value { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 for usage and configuration problems, 2 for
    /// bad or inconsistent data, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Schema(_)
            | Error::Gap(_)
            | Error::Value { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Shape { .. }
            | Error::GridMismatch
            | Error::EmptyWindow
            | Error::DegenerateWeight(_) => 2,
            Error::Autodiff(_)
            | Error::BlowUp { .. }
            | Error::DivergedGradient { .. }
            | Error::PretrainFailed { .. }
            | Error::EnsembleFailed { .. }
            | Error::OutOfSupport { .. }
            | Error::DegenerateLikelihoods => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
