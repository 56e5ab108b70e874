//! Dense tensors, the computation record and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Precision, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
