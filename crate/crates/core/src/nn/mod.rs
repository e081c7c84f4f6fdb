//! Minimal CPU convolutional network engine: batched tensors, layers with hand-written
//! backward passes, and Adam. Single-threaded and fully deterministic.

mod block;
mod layers;
mod optim;
mod real;
mod tensor;

pub use block::{ResBlock, Stage};
pub use layers::{Conv2d, GroupNorm, Swish, Upsample2x};
pub use optim::Adam;
pub use real::{gemm, Real};
pub use tensor::{Module, NamedTensor, Param, Tensor};
