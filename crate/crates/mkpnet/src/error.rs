//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A primitive produced or received NaN/Inf values.
    #[error("non-finite values in {op}")]
    NonFinite { op: &'static str },

    /// Invalid arguments or configuration.
    #[error("{0}")]
    Invalid(String),

    /// Corpus / file-format validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during training (NaN update, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/validation, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
