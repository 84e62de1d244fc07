use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported feature layout: {0}")]
    Layout(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("solver did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    Convergence { iters: usize, grad_norm: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("caption/reference ids do not align; missing: {0:?}")]
    Alignment(Vec<String>),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),

    #[error("training diverged at {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
