use thiserror::Error;

use crate::trainer::EpochMetrics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("training diverged at iteration {iteration} during {phase}: loss {loss}")]
    Diverged {
        iteration: usize,
        phase: &'static str,
        loss: f64,
        /// Completed epochs before the failure.
        history: Vec<EpochMetrics>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
