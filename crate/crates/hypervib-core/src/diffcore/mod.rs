//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Everything trainable in this crate runs through [`Graph`]: a deferred
//! computation graph over named input tensors. Build the graph once, bind
//! tensors by name, `evaluate`, then `backward` from a scalar loss.

mod graph;
mod rng;
mod tensor;

pub use graph::{grad_check, Bindings, Gradients, Graph, NodeId};
pub use rng::RandomStream;
pub use tensor::Tensor;

pub(crate) use tensor::{conv2d_sample_raw, sigmoid_scalar, softplus_scalar};
