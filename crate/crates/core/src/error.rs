use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid argument value (counts, ratios, empty inputs, ...).
    #[error("invalid argument: {0}")]
    Arg(String),

    /// Non-finite values or failed numeric checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk data.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Missing file, directory or named entity.
    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code convention: 2 usage, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Arg(_) => 2,
            Error::Format { .. } | Error::NotFound(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
