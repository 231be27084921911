//! Deterministic dense tensors with a reverse-mode tape, the layer
//! primitives a small convolutional encoder–decoder needs, and Adam.
//!
//! Reductions run sequentially in index order and convolutions accumulate
//! over the batch in a fixed order, so a forward/backward pass is bitwise
//! reproducible for a given input.

mod adam;
mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use element::Element;
pub use error::{Result, TapeError};
pub use gradcheck::{check_primitives, finite_diff_check, GradCheckConfig, GradCheckReport, Primitive, Probe};
pub use params::{grad_norm, BindMode, Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, LossKind, Pointwise, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
