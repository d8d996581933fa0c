//! Two-step training: coarse DNR plus selector on rasterized images, then
//! fine-tuning on the ray-traced images of the selected views.

mod augment;
mod checkpoint;
mod config;
mod experiment;
mod metrics;
mod pipeline;

use thiserror::Error;

use crate::diff::DiffError;
use crate::imaging::ImagingError;

pub use augment::{augment, Dihedral};
pub use checkpoint::{checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, Loaded};
pub use config::{RewardMode, SelectorKind, TrainConfig};
pub use experiment::{
    ablate, ablate_with, ablation_csv, default_budgets, run_pipeline, sweep, sweep_csv, sweep_with, trend_audit, write_run, AblationRow, RunResult,
    Switch, SweepRow, TrendFlag,
};
pub use metrics::{EpisodeRow, EvalRow, MetricsLog, Step1Row, Step2Row};
pub use pipeline::{
    evaluate, evaluate_with, new_run_rng, step1_train, step2_finetune, view_mse, CoarseEnv, Step1Result, TrainData,
    TrainView,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
