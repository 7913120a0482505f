//! Task-adaptive structured pruning for small decoder-only transformers.

pub mod allocator;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod model;
pub mod pruner;
pub mod scalar;
pub mod scoring;
pub mod stats;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Model weights are single precision.
pub type Model = model::TinyModel<f32>;

/// Activation statistics are accumulated in double precision.
pub type Stats = stats::ActivationStats<f64>;
pub type Scores = scoring::ImportanceScores<f64>;
pub type Classifier = classifier::TaskClassifier<f64>;
