//! Numeric substrate: tensors, reverse-mode autodiff, SGD.

pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::OptimizerState;
pub use tape::{fill_grads, NodeId, NormStats, Tape};
pub use tensor::Tensor;
