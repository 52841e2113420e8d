use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected \"GKVT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported trace version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("truncated payload in {section}{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Truncated {
        section: &'static str,
        step: Option<usize>,
    },

    #[error("non-finite value at step {step}, layer {layer}")]
    NonFinite { step: usize, layer: usize },

    #[error("header inconsistency: {0}")]
    Header(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate scores: {0}")]
    Degenerate(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 1 usage, 2 I/O or input format, 3 computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Missing(_) => 1,
            Error::Io(_)
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::NonFinite { .. }
            | Error::Header(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
