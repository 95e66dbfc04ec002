//! Convolutional classification of confocal laser microscopy images.
//!
//! The crate covers the whole experimental loop: tensors with reverse-mode
//! differentiation ([`tensor`]), dense and squeeze-and-excitation ResNeXt
//! building blocks ([`nn`]), Adam training ([`train`]), subject-wise
//! cross-validation and augmentation ([`data`]), nine-crop evaluation and
//! metric reporting ([`eval`]), a named-tensor weight container ([`weights`])
//! and the configuration-driven runner behind the `clmnet` binary
//! ([`experiment`]).
//!
//! All numeric code is generic over [`Scalar`]; `f32` is the production type
//! and `f64` is used for finite-difference gradient checks.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
