//! Task-adaptive structured pruning for small vision transformers.
//!
//! A device summarizes its local feature distribution with a diagonal
//! Gaussian mixture and uploads only the mixture parameters. The cloud uses
//! them to pick a proxy ("metric") subset of a public pool, scores every FFN
//! hidden unit and attention value channel on that subset, derives per-layer
//! budgets from output-KL layer ablations, and excises the weakest units.
//!
//! Module map:
//! - [`nn`]: instrumented transformer, gradients, checkpoints
//! - [`gmm`]: EM fitting, BIC selection, the upload wire format
//! - [`metric`]: feature extraction and likelihood top-N selection
//! - [`importance`]: neuron (activeness/redundancy/relevance) and layer scores
//! - [`pruner`]: budget allocation, structural pruning, head recovery
//! - [`sensitivity`]: Kendall's tau and cross-task comparisons
//! - [`datagen`]: synthetic non-IID scenarios and the toy base model
//! - [`pipeline`]: device/cloud orchestration, weighted accuracy, grid search

pub mod container;
pub mod datagen;
pub mod error;
pub mod gmm;
pub mod importance;
pub mod metric;
pub mod nn;
pub mod pipeline;
pub mod pruner;
pub mod sensitivity;
pub mod stats;

pub use error::{Result, TapError};

/// Current version tag written into every persisted artifact.
pub const FORMAT_VERSION: u32 = 1;
