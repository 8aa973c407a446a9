//! Error types shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by tensor, tape, model, and trainer operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An index (class label, sample id, node id) is out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A contract violation: empty input, non-scalar loss, and similar.
    Contract(&'static str),
    /// A configuration constraint does not hold.
    InvalidConfig(String),
    /// An input sequence exceeds the configured maximum length.
    LengthExceeded { len: usize, max: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            CoreError::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::LengthExceeded { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
