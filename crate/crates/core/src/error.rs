//! Error type shared across the core library.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Tensor operands have incompatible shapes.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single-tensor shape precondition failed.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// An argument violated its contract (axis out of range, zero extent, ...).
    BadArgument { op: &'static str, message: String },
    /// A configuration field is invalid.
    Config { field: String, message: String },
    /// Bad input data (token id out of vocabulary, empty batch, ...).
    Input { message: String },
    /// The requested component is not enabled in this model.
    Usage { message: String },
    /// A loss or metric became non-finite during training.
    NonFinite { component: String },
    /// A metric could not be computed (e.g. no valid pixels).
    Metric { message: String },
    /// Two reports cannot be combined.
    Report { message: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            CoreError::BadShape { op, shape, expected } => {
                write!(f, "{op}: bad shape {shape:?}, expected {expected}")
            }
            CoreError::BadArgument { op, message } => write!(f, "{op}: {message}"),
            CoreError::Config { field, message } => {
                write!(f, "config field `{field}`: {message}")
            }
            CoreError::Input { message } => write!(f, "input: {message}"),
            CoreError::Usage { message } => write!(f, "usage: {message}"),
            CoreError::NonFinite { component } => {
                write!(f, "non-finite value in component `{component}`")
            }
            CoreError::Metric { message } => write!(f, "metric: {message}"),
            CoreError::Report { message } => write!(f, "report: {message}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
