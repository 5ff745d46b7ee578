//! Classifier-to-detector adaptation at desk scale.
//!
//! A classification network is fine-tuned into a detector on the categories
//! that have box annotations (set B). The per-category change of the output
//! layer is then transferred to the remaining categories (set A) by averaging
//! the deltas of their nearest neighbours in normalized classifier-weight
//! space. Region scores are the category output minus the background output.

pub mod adapter;
pub mod analysis;
pub mod bbox;
pub mod config;
pub mod data;
pub mod detector;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod model;
pub mod persist;
pub mod scalar;
pub mod trainer;

pub use bbox::BBox;
pub use model::{Architecture, CategoryPartition, HeadState, ModelError, NetworkParams, OutputHead, WeightMatrix};
pub use scalar::Scalar;

/// Double-precision network.
pub type Network = NetworkParams<f64>;
/// Single-precision network, the type used by the command-line tool.
pub type Network32 = NetworkParams<f32>;
pub type Matrix = WeightMatrix<f64>;
pub type Matrix32 = WeightMatrix<f32>;
