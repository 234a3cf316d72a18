//! Minimal tensor and reverse-mode autodiff engine backing the network.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Direction;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
