//! Dense tensors, the differentiable operator set and reverse-mode
//! gradient computation.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Activation, ConvSpec, Gradients, Graph, Padding, Var};
pub use tensor::{Precision, Real, Tensor};
