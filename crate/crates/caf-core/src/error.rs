//! Error types shared across the kernel, autodiff, and model layers.

use thiserror::Error;

/// Errors produced by tensor kernels, the tape, and model construction.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A dimension of an input does not match what the operation requires.
    /// `detail` names the offending dimension and the expected/actual values.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Channel count is not divisible by the requested group count.
    #[error("{op}: channel count {channels} not divisible by {groups} groups")]
    GroupMismatch {
        op: &'static str,
        channels: usize,
        groups: usize,
    },

    /// The loss node handed to `backward` is not a scalar.
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: (usize, usize, usize, usize) },

    /// `backward` was called on a tape with no recorded nodes.
    #[error("backward on empty tape")]
    EmptyTape,

    /// A tape can only run one backward pass per forward recording.
    #[error("backward already ran on this tape")]
    TapeConsumed,

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Invalid configuration value (negative learning rate, empty class set, ...).
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
