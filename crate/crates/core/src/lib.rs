//! Tensor-valued neuron networks.
//!
//! Every activation in a network built with this crate is a feature map whose
//! cells are dense tensors rather than scalars. A layer transforms each cell of
//! a k×k×m window by contracting it with a learned neuron tensor and sums the
//! transformed tensors. The crate provides:
//!
//! * [`tensor`]: the dense tensor type and the contraction primitive,
//! * [`autodiff`]: a reverse-mode tape over those primitives,
//! * [`layers`]: tensor convolution, residual blocks, batch norm, PReLU and the
//!   scalar conv/dense layers used by baseline CNNs,
//! * [`models`]: declarative model specs, builtin architectures, parameter
//!   audits and checkpoints,
//! * [`training`], [`data`], [`adversarial`]: the experiment machinery.
//!
//! Heavy kernels run data-parallel through rayon when the `parallel` feature is
//! enabled and [`exec::ExecMode::Parallel`] is selected; results are bitwise
//! identical to the sequential path.

pub mod adversarial;
pub mod autodiff;
pub mod data;
mod error;
pub mod exec;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

/// Element type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Element type of every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;
