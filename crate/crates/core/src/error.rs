use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("context overflow: {len} tokens exceeds the model limit of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
