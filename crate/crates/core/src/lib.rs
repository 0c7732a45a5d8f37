//! Hierarchy-aware convolutional classifiers over a label tree.
//!
//! The crate builds two architectures on top of a shared conv trunk: a
//! branched model with per-level classification heads, and a distilled
//! variant where one shared fully connected stack serves every level while
//! the trunk and per-branch adapter layers stay frozen. Around those sit a
//! two-phase training procedure, per-level accuracy and tree-distance
//! evaluation, and exact parameter/MAC cost accounting.
//!
//! Numeric code is generic over the scalar type ([`Scalar`]); training runs
//! in `f64`, inference may run in `f32`. Concrete aliases live at the crate
//! root.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod shaw;
pub mod tensor;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Inference-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Training-precision graph.
pub type Graph64 = nn::Graph<f64>;
/// Inference-precision graph.
pub type Graph32 = nn::Graph<f32>;
/// Training-precision model.
pub type ModelGraph64 = model::ModelGraph<f64>;
/// Inference-precision model.
pub type ModelGraph32 = model::ModelGraph<f32>;
/// Training-precision dataset.
pub type Dataset64 = data::Dataset<f64>;
/// Inference-precision dataset.
pub type Dataset32 = data::Dataset<f32>;
