use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite gradient element at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("unsupported modulation order {0} (supported: 4, 16, 256)")]
    UnsupportedOrder(usize),

    #[error("target is not one-hot: {0}")]
    NotOneHot(String),

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("non-finite loss for client {client} in round {round}")]
    NonFiniteLoss { client: usize, round: usize },

    #[error(
        "codeword {codeword} still failing after {cap} transmissions; \
         the channel is too poor for the ECRT baseline"
    )]
    RetransmissionCap { codeword: usize, cap: u32 },

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{path}: count mismatch, {images} images vs {labels} labels")]
    CountMismatch { path: PathBuf, images: usize, labels: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
