use thiserror::Error;

/// Contract violations raised by tensor construction, primitives and backward.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("variable belongs to a different or cleared tape")]
    ForeignVar,
    #[error("serialization: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TapeError>;

pub(crate) fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TapeError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn invalid<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TapeError::Invalid {
        op,
        msg: msg.into(),
    })
}
