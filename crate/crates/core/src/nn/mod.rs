//! Minimal dense network toolkit with hand-written backward passes.
//!
//! Layers cache what their backward pass needs during `forward`; `infer` is
//! the side-effect-free evaluation path used on read-only snapshots.

mod conv;
pub mod gradcheck;
mod gru;
mod layers;
mod param;
mod real;
mod tensor;

pub use conv::{Conv1d, ParallelConv};
pub use gru::Gru;
pub use layers::{BatchNorm, Dropout, Elu, GlobalAvgPool, Layer, Linear, MaxPool1d, Relu, Sequential};
pub use param::{zip_params, Buffer, Module, Param, ParamKind};
pub use real::{matmul, Real};
pub use tensor::Tensor;
