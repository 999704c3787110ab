use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("format error in field `{field}`: {msg}")]
    Format { field: String, msg: String },
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("task spec error: {0}")]
    Spec(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("parse error at line {line}, field `{field}`: {msg}")]
    Jsonl {
        line: usize,
        field: String,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
