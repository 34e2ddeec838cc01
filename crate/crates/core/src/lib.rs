//! Differentially private synthesis of human-mobility trajectories.
//!
//! The crate trains a sequence generator over grid-discretized stay-point
//! trajectories under DP-SGD, optionally warm-started from a privately
//! released coarse transition matrix, then samples synthetic trajectories and
//! scores them against the real data with a suite of distributional metrics.
//!
//! Numeric building blocks ([`tensor`], [`autodiff`]) are generic over the
//! scalar type; the concrete `f64` aliases below are what the pipeline uses.

pub mod autodiff;
pub mod checkpoint;
pub mod dp;
pub mod error;
pub mod evaluate;
pub mod generate;
pub mod geo;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Canonical 64-bit tensor used by the shipped pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// Canonical 64-bit computation graph.
pub type Graph = autodiff::Graph<f64>;
/// Canonical 64-bit parameter store.
pub type ParamStore = autodiff::ParamStore<f64>;
/// Canonical 64-bit per-example gradient set.
pub type GradientSet = autodiff::GradientSet<f64>;
