use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intensity window: lo ({lo}) must be below hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },

    #[error("invalid spacing {0:?}: every component must be positive and finite")]
    InvalidSpacing([f64; 3]),

    #[error("invalid dims {0:?}: every axis must be at least 1")]
    InvalidDims([usize; 3]),

    #[error("crop {crop:?} does not fit in volume {dims:?}")]
    CropTooLarge { crop: [usize; 3], dims: [usize; 3] },

    #[error("volume format error in field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cannot normalize a vector with norm {0:e}")]
    DegenerateNorm(f64),

    #[error("attention over an all-masked key sequence")]
    DegenerateAttention,

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },

    #[error("refusing to resume: checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint architecture does not match the config: {0}")]
    ArchitectureMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("prompt error for attribute `{attribute}`: {reason}")]
    Prompt { attribute: String, reason: String },

    #[error("attribute `{0}` has a single class in the training labels")]
    DegenerateLabels(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 config, 3 I/O, 4 diverged run, 5 checkpoint
    /// mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Spec(_)
            | Error::Prompt { .. }
            | Error::DegenerateLabels(_)
            | Error::InvalidWindow { .. }
            | Error::InvalidSpacing(_)
            | Error::InvalidDims(_)
            | Error::CropTooLarge { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) | Error::Json(_) => 3,
            Error::Diverged { .. } => 4,
            Error::FingerprintMismatch { .. } | Error::ArchitectureMismatch(_) => 5,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
