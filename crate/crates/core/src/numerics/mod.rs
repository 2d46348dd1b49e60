//! Tensor kernels, reverse-mode differentiation, parameters, optimisers and
//! checkpoints.

pub mod checkpoint;
pub mod fastmath;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};
