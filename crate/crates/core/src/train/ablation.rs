//! The component ablation: NCE alone, then reconstruction, the codebook,
//! geometry (substitution and occupancy) and the auxiliary KL slot.

use serde::{Deserialize, Serialize};

use crate::seed::derive_seed;
use crate::synthdata::{generate_dataset, SceneConfig, SceneSample};

use super::eval::{joint_usage, occupancy_accuracy, orthogonality_norms, reconstruction_mse, OrthNorms};
use super::model::Fill;
use super::pretrain::{pretrain, MetricsRow, PretrainOutput};
use super::probe::{linear_probe, ProbeConfig, ProbeReport};
use super::{TermFlags, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Nce,
    Rec,
    Codebook,
    Geo,
    Kl,
}

impl AblationRow {
    pub const ALL: [Self; 5] = [Self::Nce, Self::Rec, Self::Codebook, Self::Geo, Self::Kl];

    pub fn label(self) -> &'static str {
        match self {
            Self::Nce => "(1) nce",
            Self::Rec => "(2) +rec",
            Self::Codebook => "(3) +codebook",
            Self::Geo => "(4) +geo",
            Self::Kl => "(5) +kl",
        }
    }

    /// `base` with this row's terms switched on and the rest off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let rank = self as u8;
        let terms = TermFlags {
            nce: true,
            rec: rank >= 1,
            orth: rank >= 1,
            commit: rank >= 2,
            occ: rank >= 3,
            kl: rank >= 4,
        };
        TrainConfig { terms, substitution: rank >= 3, ..base.clone() }
    }
}

/// Pretraining scenes plus disjoint labelled and held-out sets for evaluation.
pub struct ExperimentData {
    pub train: Vec<SceneSample>,
    pub probe_train: Vec<SceneSample>,
    pub heldout: Vec<SceneSample>,
    pub n_classes: usize,
}

impl ExperimentData {
    pub fn generate(scene: &SceneConfig, n_train: usize, n_probe: usize, n_heldout: usize, root_seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            train: generate_dataset(scene, n_train, derive_seed(root_seed, "train-set", 0))?,
            probe_train: generate_dataset(scene, n_probe, derive_seed(root_seed, "probe-set", 0))?,
            heldout: generate_dataset(scene, n_heldout, derive_seed(root_seed, "heldout-set", 0))?,
            n_classes: scene.n_classes(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: AblationRow,
    pub seed: u64,
    pub probe: ProbeReport,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub joint_usage: Option<f64>,
    pub rec_mse: Option<f64>,
    pub occupancy_accuracy: Option<f64>,
    pub orth: OrthNorms,
}

fn epoch_mean(metrics: &[MetricsRow], epoch: usize) -> f64 {
    let rows: Vec<f64> = metrics.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

/// Held-out measurements of one trained model.
pub fn evaluate_run(row: AblationRow, cfg: &TrainConfig, out: &PretrainOutput, data: &ExperimentData, probe: &ProbeConfig) -> Result<AblationRun, TrainError> {
    let eval_seed = derive_seed(cfg.seed, "eval", 0);
    let book = out.codebook.as_ref();
    let fill = if cfg.substitution { Fill::Substitution } else { Fill::MaskToken };
    Ok(AblationRun {
        row,
        seed: cfg.seed,
        probe: linear_probe(&out.model, cfg, &data.probe_train, &data.heldout, data.n_classes, probe)?,
        first_epoch_loss: epoch_mean(&out.metrics, 0),
        last_epoch_loss: epoch_mean(&out.metrics, cfg.epochs - 1),
        joint_usage: book.map(|b| joint_usage(&out.model, b, cfg, &data.heldout, eval_seed).map(|s| s.joint_fraction)).transpose()?,
        rec_mse: cfg.terms.rec.then(|| reconstruction_mse(&out.model, book, cfg, &data.heldout, fill, eval_seed)).transpose()?,
        occupancy_accuracy: cfg.terms.occ.then(|| occupancy_accuracy(&out.model, book, cfg, &data.heldout, eval_seed)).transpose()?,
        orth: orthogonality_norms(&out.model, cfg, &data.heldout)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: AblationRow,
    pub label: String,
    pub median_probe_accuracy: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<RowSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains and evaluates every `(row, seed)` combination.
pub fn run_ablation(base: &TrainConfig, rows: &[AblationRow], seeds: &[u64], data: &ExperimentData, probe: &ProbeConfig) -> Result<AblationReport, TrainError> {
    let mut runs = Vec::new();
    for &row in rows {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..row.apply(base) };
            log::info!("ablation {} seed {seed}", row.label());
            let out = pretrain(&cfg, &data.train)?;
            runs.push(evaluate_run(row, &cfg, &out, data, probe)?);
        }
    }
    let rows = rows
        .iter()
        .map(|&row| {
            let accuracies: Vec<f64> = runs.iter().filter(|r| r.row == row).map(|r| r.probe.accuracy).collect();
            RowSummary { row, label: row.label().into(), median_probe_accuracy: median(&accuracies), accuracies }
        })
        .collect();
    Ok(AblationReport { runs, rows })
}
