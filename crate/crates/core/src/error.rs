use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
