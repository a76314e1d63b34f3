//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument outside shape concerns (bad hyperparameter, empty batch, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A metric that has no defined value because a required mask is empty.
    #[error("undefined-empty: {0}")]
    UndefinedEmpty(&'static str),

    /// Config file parse failure, with 1-based line number.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// PGM/PPM parse failure, with byte offset into the input.
    #[error("image parse error at byte {offset}: {msg}")]
    Pnm { offset: usize, msg: String },

    /// Checkpoint format violation (version, length disagreement, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code for the CLI: 2 for I/O and parse problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Pnm { .. }
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
