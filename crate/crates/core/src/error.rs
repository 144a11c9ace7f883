use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: unsupported operand shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },

    #[error("kl-divergence: zero entry at index {index} in second argument")]
    KlZeroEntry { index: usize },

    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("tensor belongs to a different tape")]
    ForeignTape,

    #[error("grad_check: non-finite forward value {value}")]
    NonFiniteForward { value: f64 },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("token id {token} out of range (vocab {vocab})")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid span ({start}, {end}) for sequence of length {len}")]
    InvalidSpan {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("attention row {row} is not on the simplex (sum {sum})")]
    SimplexViolation { row: usize, sum: f64 },

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
