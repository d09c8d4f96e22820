use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("construction error: {0}")]
    Construction(String),

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state space of size {size} exceeds the enumeration limit {limit}")]
    Capacity { size: u128, limit: u128 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite rate encountered: {0}")]
    NonFinite(String),

    #[error("scorer: {0}")]
    Scorer(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_index(index: usize, bound: usize) -> Result<()> {
    if index < bound {
        Ok(())
    } else {
        Err(Error::Index { index, bound })
    }
}
