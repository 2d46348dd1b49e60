//! Column-lattice part-whole networks: a reverse-mode autodiff core, a
//! convolutional tokenizer, the iterative level lattice, contrastive and
//! classification heads, training loops, dataset readers and
//! interpretability exports.
//!
//! Numerics are generic over [`scalar::Scalar`]; the aliases below fix the
//! two supported precisions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod interpret;
pub mod lattice;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

/// Model at 32-bit precision, the training default.
pub type Model32 = model::Agglomerator<f32>;
/// Model at 64-bit precision, used for gradient checks.
pub type Model64 = model::Agglomerator<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type State32 = lattice::LatticeState<f32>;
pub type State64 = lattice::LatticeState<f64>;
