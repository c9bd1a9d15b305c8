use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Variants fall into three families that the command-line front end maps
/// onto distinct exit codes: configuration problems, data problems and
/// compute problems (shape mismatches, non-finite values, bad graphs).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("compute error: {0}")]
    Compute(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Shape { .. } | Error::Compute(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
