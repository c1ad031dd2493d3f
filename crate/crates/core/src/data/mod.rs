//! Synthetic data, dataset ingestion, folds and metrics.

pub mod dataset;
pub mod folds;
pub mod metrics;
pub mod pnm;
pub mod synth;

pub use dataset::{load_dataset, polar_input, prepare_samples, InputSpec, Sample, Subject};
pub use folds::{fold_indices, kfold_split};
pub use metrics::{auroc, mean_std, metrics, Metrics};
pub use synth::{synth_generate, Effect, SynthConfig};
