//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("dataset format error: {0}")]
    DataFormat(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class for the CLI: 1 validation, 2 missing input, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::EmptyBatch(_)
            | Error::Config(_) => 1,
            Error::MissingInput(_) => 2,
            _ => 3,
        }
    }
}
