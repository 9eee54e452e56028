//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Failure modes of the core pipeline. Contract violations that indicate a
/// caller bug (not bad data) are asserted instead.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor operands with incompatible shapes.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// Scalar argument outside its mathematical domain (e.g. t outside [0,1],
    /// a probability vector off the simplex).
    Domain {
        what: &'static str,
        detail: String,
    },
    /// Sequence or embedding block whose length disagrees with the model's
    /// sequence layout.
    Layout {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// Index outside its valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    /// Training aborted on a non-finite loss.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
    },
    /// An operation that needs at least one element got an empty collection.
    EmptySet {
        what: &'static str,
    },
    /// Poisoning asked for more samples than the eligible pool holds.
    InsufficientEligible {
        needed: usize,
        available: usize,
    },
    /// Configuration violates a structural invariant.
    InvalidConfig {
        detail: String,
    },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            CoreError::Domain { what, detail } => write!(f, "domain error in {what}: {detail}"),
            CoreError::Layout { what, expected, got } => {
                write!(f, "layout error: {what} expected {expected}, got {got}")
            }
            CoreError::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            CoreError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            CoreError::EmptySet { what } => write!(f, "{what} must be nonempty"),
            CoreError::InsufficientEligible { needed, available } => {
                write!(f, "need {needed} eligible samples, only {available} available")
            }
            CoreError::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
