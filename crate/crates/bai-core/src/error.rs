//! Crate-wide error type and the process exit-code contract.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or corrupt input artifact (bad magic, truncation, schema drift).
    #[error("bad data: {0}")]
    Format(String),

    /// Non-finite value encountered where the format forbids it.
    #[error("non-finite value in tensor '{tensor}' at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    /// Checkpoints that cannot be merged together.
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    /// Merge weights must sum to 1 within 1e-6; got this sum.
    #[error("merge weights must sum to 1.0 within 1e-6 (got {sum}); weights are never renormalized silently")]
    WeightSum { sum: f64 },

    /// Invalid configuration (schema violation, out-of-range field, bad recipe).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problems (empty, malformed rows, inconsistent vocab).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: non-finite loss at step {step}")]
    Divergence { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable CLI exit codes: 1 usage (clap), 2 config, 3 data, 4 numeric, 5 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::WeightSum { .. } => 2,
            Error::Format(_) | Error::Data(_) | Error::Incompatible(_) => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } => 4,
            Error::Io { .. } => 5,
        }
    }
}
