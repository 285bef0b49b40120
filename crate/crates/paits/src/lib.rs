//! Pretraining and augmentation workbench for sparse, irregularly sampled
//! time series represented as (time, value, feature) triplet sequences.
//!
//! The crate covers the full pipeline: triplet data model and windowing,
//! noise/masking augmentations (including interval-bucketed geometric mask
//! pools), a transformer triplet encoder with exact reverse-mode gradients,
//! the forecasting/reconstruction pretext losses, supervised finetuning,
//! a random strategy search over the pretraining option grid, and ranking
//! metrics for evaluation.

pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::PaitsError;

pub type Result<T> = std::result::Result<T, PaitsError>;
