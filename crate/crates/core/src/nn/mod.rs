//! Minimal reverse-mode autodiff for dense 2D/3D convolutional networks.
//!
//! Activations are [`Tensor`]s in `(N, C, D, H, W)` layout; 2D data uses
//! `D = 1` with `1×k×k` kernels. Parameters live in a [`ParamStore`] that a
//! [`Tape`] borrows for one forward/backward pass, so the same architecture
//! can run against several parameter sets (student and teacher).

mod params;
mod real;
mod tape;
mod tensor;

pub use params::{kaiming, Param, ParamId, ParamStore, Role};
pub use real::{gemm, Mat, Real};
pub use tape::{BnUpdate, Tape, Var, BN_EPS};
pub use tensor::Tensor;
