use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss at step {step}: {value}")]
    NonFinite { step: usize, value: f64 },

    #[error("gradient missing for parameter `{0}`")]
    MissingGradient(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint: bad magic (not a FALN file)")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: file truncated")]
    CheckpointTruncated,

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("checkpoint: architecture mismatch: {0}")]
    CheckpointArch(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dataset: {0}")]
    Data(String),

    #[error("matrix is not symmetric positive semi-definite: {0}")]
    NotPsd(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
