//! A small dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s (row-major, generic over `f32`/`f64`). Differentiable
//! computations are recorded on a [`Tape`], which hands out [`Var`] handles; calling
//! [`Tape::backward`] on a scalar replays the tape in reverse and returns the
//! accumulated [`Gradients`] of every leaf that requires them.
//!
//! The op set is the one needed by the motion transformer: broadcasting batched
//! matmul, fused multi-head score/apply kernels, masked softmax (and its ReLU
//! sum-normalized alternative), layer norm, dropout and a handful of pointwise ops.

mod backward;
mod element;
mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod shape;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use shape::broadcast_shape;
pub use tape::{AttnMask, Normalizer, Tape, Var};
pub use tensor::Tensor;

/// Epsilon added to the variance inside the square root of [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive score assigned to masked attention entries in softmax mode.
pub const MASK_VALUE: f64 = -1e9;
