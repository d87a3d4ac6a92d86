//! Dense N-dimensional tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! Values live in a [`Tensor`]; computations are recorded on a [`Tape`] which
//! hands out lightweight [`Var`] handles. Calling [`Tape::backward`] on a
//! scalar replays the recorded operations in reverse and leaves
//! `d(loss)/d(node)` on every node that requires a gradient.
//!
//! ```
//! use sdsnet_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```
//!
//! The element type is generic over `f32` (training) and `f64`
//! (gradient verification).

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use kernels::{Conv3dSpec, Rounding};
pub use tape::{BackwardRule, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
