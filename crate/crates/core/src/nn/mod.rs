//! Network building blocks and model construction.

mod layers;
mod model;
pub mod spec;

pub use layers::{
    BatchNorm2d, Conv2d, DenseBlock, DenseLayer, Head, Linear, Param, ParamKind, Projection, ResNeXtBlock,
    SqueezeExcitation, Stem, TransitionLayer, BN_EPS, BN_MOMENTUM,
};
pub use model::{build_model, Model};
pub use spec::{BlockSpec, ModelSpec, ResnextSpec};

/// Whether batch normalization uses batch statistics (and updates running
/// estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
