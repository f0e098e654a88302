//! Minimal reverse-mode automatic differentiation.
//!
//! Forward computations are recorded on a [`Tape`]; [`Tape::backward`]
//! returns gradients for every registered parameter. Tensors are dense and
//! row-major, and every operation checks shapes at its boundary.

mod error;
mod gradcheck;
mod ops;
mod optim;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::finite_diff_check;
pub use ops::Padding;
pub use optim::{AdamWConfig, AdamWState, ParamRef};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tape::{Gradients, ParamKey, Tape, Var};
pub use tensor::Tensor;
