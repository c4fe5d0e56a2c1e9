//! Pretraining loop, optimiser, linear probe and ablations.

mod ablation;
mod config;
mod eval;
mod model;
mod optim;
mod pretrain;
mod probe;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::synthdata::SynthError;

pub use ablation::{evaluate_run, median, run_ablation, AblationReport, AblationRow, AblationRun, ExperimentData, RowSummary};
pub use config::{TermFlags, TrainConfig, CONFIG_SCHEMA_VERSION};
pub use eval::{joint_usage, occupancy_accuracy, orthogonality_norms, reconstruction_mse, OrthNorms};
pub use model::{encode_scene, scene_step, Checkpoint, Fill, Model, SceneCache, SceneStep, CHECKPOINT_SCHEMA_VERSION};
pub use optim::{adam_step, one_cycle_lr, Adam};
pub use pretrain::{pretrain, pretrain_with, write_metrics_csv, MetricsRow, PretrainOutput};
pub use probe::{accuracy, fit_linear_probe, linear_probe, point_latents, probe_features, LinearClassifier, ProbeConfig, ProbeReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema version {found:?}, expected {expected:?}")]
    Version { found: String, expected: &'static str },
    #[error("gradient of {0} is not finite")]
    NonFiniteGradient(String),
    /// Training stopped on a non-finite value; `last_row` is the last finite metrics row.
    #[error("training diverged at step {step}: {cause}")]
    Diverged { step: u64, cause: String, last_row: Option<Box<pretrain::MetricsRow>> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
