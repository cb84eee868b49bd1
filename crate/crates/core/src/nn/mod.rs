//! Dense tensors, a reverse-mode tape and an Adam optimizer: just enough
//! to express and train the estimator network.

mod adam;
mod graph;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
