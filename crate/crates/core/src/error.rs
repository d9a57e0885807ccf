use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// An operation that needs at least one row or element got none.
    EmptyInput(&'static str),
    /// The data buffer does not match the declared shape.
    DataLength {
        expected: usize,
        actual: usize,
    },
    /// A value was NaN or infinite where finite input is required.
    NonFinite(&'static str),
    /// API misuse, for example running backward on a var from another tape.
    Usage(&'static str),
    InsufficientNormals {
        requested: usize,
        available: usize,
    },
    DuplicateId(String),
    MissingId(String),
    TokenOutOfRange {
        token: usize,
        vocab: usize,
    },
    /// A token sequence without a leading bos and trailing eos, or too short.
    BadSequence(&'static str),
    EmptyCorpus,
    EmptyLexicon,
    /// The training loss became NaN or infinite.
    Diverged {
        step: usize,
        loss: f64,
    },
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape error in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::EmptyInput(op) => write!(f, "{op}: empty input"),
            Error::DataLength { expected, actual } => {
                write!(f, "data length {actual} does not match shape ({expected} expected)")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::InsufficientNormals {
                requested,
                available,
            } => write!(
                f,
                "normality pool needs {requested} normal instances but only {available} are available"
            ),
            Error::DuplicateId(id) => write!(f, "duplicate id {id:?}"),
            Error::MissingId(id) => write!(f, "id {id:?} not found"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} out of range for vocabulary of {vocab}")
            }
            Error::BadSequence(msg) => write!(f, "bad token sequence: {msg}"),
            Error::EmptyCorpus => f.write_str("empty corpus"),
            Error::EmptyLexicon => f.write_str("empty tag lexicon"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
