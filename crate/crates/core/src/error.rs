//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not. Both are named so the caller can
    /// see exactly what was fed in.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structural configuration problem (bad width list, odd channel
    /// count, head count not dividing the embedding, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad runtime input (file contents, value ranges, empty splits).
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized file that does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss. The offending step is recorded.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
