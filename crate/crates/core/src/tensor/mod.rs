//! Dense tensors, reverse-mode differentiation, and the layer primitives
//! (convolution, normalization, pooling, resize, activations) the network
//! is assembled from.

mod array;
pub(crate) mod kernels;
mod scalar;
mod tape;

pub use array::Tensor;
pub use scalar::Scalar;
pub use tape::{
    Activation, BatchNormMode, BatchStats, Gradients, PoolKind, Tape, Var, Window, PROB_EPS,
};

