//! Reverse-mode differentiation over dense `f64` matrices, plus the layers,
//! optimizer and checkpoint format used by every trainable network.

pub mod check;
mod checkpoint;
mod graph;
mod nn;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use graph::{logsumexp_iter, logsumexp_slice, sigmoid, softplus, Gradients, Graph, SetLayout, Var};
pub use nn::{Activation, Linear, Mlp};
pub use optim::{Adam, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
