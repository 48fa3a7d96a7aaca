//! Reverse-mode differentiation over dense `f64` tensors, with the layers,
//! losses and optimizer needed to train small convolutional VAEs on CPU.

// `!(x > 0.0)` is used deliberately so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use layers::{
    accumulate_grads, reparam_sample, Activation, BatchNorm, Conv1d, ConvTranspose1d, Crop, Ctx, Dropout, Linear, Mode,
    Module, Reshape, Sequential,
};
pub use params::{BufferUpdate, ParamId, ParamStore};
pub use tensor::Tensor;
