//! Config-driven runs: cross-validation, single folds, evaluation and
//! report rendering.

mod config;
mod runner;

pub use config::{EvalSection, Precision, RunConfig, TrainSection, CONFIG_VERSION, ECHO_FILE};
pub use runner::{
    crossval, evaluate, generate, prepare, report, split, train_fold, CrossvalOutcome, Failure, FailureKind,
    FoldArtifact, Prediction, Prepared, EPOCHS_FILE, EVALUATION_FILE, FOLD_FILE, MODEL_FILE, REPORT_FILE,
    TABLE_FILE,
};
