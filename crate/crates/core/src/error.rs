use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown category code {0}")]
    UnknownCategory(i64),

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("invalid UTF-8 in input at byte {0}")]
    InvalidUtf8(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tokenizer hash mismatch: checkpoint expects {expected}, got {actual}")]
    TokenizerMismatch { expected: String, actual: String },

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("no forward pass recorded")]
    NoForwardPass,

    #[error("checkpoint format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while running. A missing input file counts as bad input.
    pub fn is_validation(&self) -> bool {
        if let Error::Io { source, .. } = self {
            return source.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            Error::MalformedRecord { .. }
                | Error::Validation(_)
                | Error::Usage(_)
                | Error::Config(_)
                | Error::UnknownCategory(_)
                | Error::UnknownTokenId(_)
                | Error::InvalidUtf8(_)
                | Error::TokenizerMismatch { .. }
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
