use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("M must divide d (d = {d}, M = {m})")]
    SubspaceMismatch { d: usize, m: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("code {code} out of range for {nbits}-bit codebook (token {token}, subspace {subspace})")]
    CodeOutOfRange {
        token: usize,
        subspace: usize,
        code: usize,
        nbits: u32,
    },

    #[error("codebook mismatch: {0}")]
    CodebookMismatch(String),

    #[error("attention over zero tokens is undefined")]
    EmptyPartial,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("flush worker disconnected")]
    WorkerGone,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
