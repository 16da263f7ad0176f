//! Building blocks for a small convolutional detector with cross-channel
//! attention: a rank-4 tensor type, convolution/normalization/attention
//! kernels, tape-based reverse-mode differentiation, a toy disc-detection
//! task with its training loop, detection metrics, and binary tensor and
//! checkpoint formats.
//!
//! Kernels run data-parallel over independent output planes by default; the
//! `parallel` feature (on by default) selects rayon, and disabling it swaps
//! in a sequential path producing bit-identical results.

pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod conv;
pub mod detect;
pub mod error;
pub mod io;
pub mod metrics;
mod par;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Scalar, Tensor4};
