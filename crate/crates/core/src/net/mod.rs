//! The multi-branch polar network and its training loop.

mod config;
mod model;
mod train;

pub use config::ModelConfig;
pub use model::{projection_name, softmax, BasicBlock, Branch, Cbam, ForwardPass, ParamId, ParamStore, Pfem, PolarNetModel};
pub use train::{
    cross_validate, fold_metrics, sample_folds, score_samples, subject_scores, summarize, summarize_subjects, train_fold, EpochLog,
    FoldReport, Summary, TrainConfig,
};
