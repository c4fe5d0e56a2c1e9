use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix};
use crate::codebook::{ema_update, revive_dead_codes, usage_stats, Codebook, Modality};
use crate::nn::Parameters;
use crate::objectives::{total_loss, KlSlot, LossBundle, TERM_NAMES};
use crate::pretext::MaskPlan;
use crate::seed::{derive_seed, rng_for};
use crate::synthdata::SceneSample;

use super::model::{encode_scene, scene_step, Checkpoint, Model, SceneCache};
use super::optim::{one_cycle_lr, Adam};
use super::{TrainConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub nce: f64,
    pub commit: f64,
    pub rec: f64,
    pub occ: f64,
    pub orth: f64,
    pub kl: f64,
    pub total: f64,
    /// Cumulative over the run; 0 without a codebook.
    pub joint_usage: f64,
    pub perplexity: f64,
}

impl MetricsRow {
    pub fn terms(&self) -> [f64; 6] {
        [self.nce, self.commit, self.rec, self.occ, self.orth, self.kl]
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["step", "epoch", "lr", "nce", "commit", "rec", "occ", "orth", "kl", "total", "joint_usage", "perplexity"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct PretrainOutput {
    pub model: Model,
    pub codebook: Option<Codebook>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

pub fn pretrain(cfg: &TrainConfig, scenes: &[SceneSample]) -> Result<PretrainOutput, TrainError> {
    pretrain_with(cfg, scenes, &KlSlot::default())
}

/// Codebook rows drawn from the shared features of the first batch's pairs.
fn initial_codebook(model: &Model, caches: &[SceneCache], scenes: &[SceneSample], batch: &[usize], cfg: &TrainConfig) -> Result<Codebook, TrainError> {
    let mut donors = Vec::new();
    for &i in batch {
        let f = encode_scene(model, &caches[i], &scenes[i], &MaskPlan::empty())?;
        let (f2d, f3d) = (f.f2d_shared.data(), f.f3d_shared.data());
        for c in &scenes[i].correspondences {
            donors.extend_from_slice(f3d.row(c.point_index));
            donors.extend_from_slice(f2d.row(c.pixel_row * caches[i].grid.width + c.pixel_col));
        }
    }
    let c = cfg.encoder.channels;
    if donors.is_empty() {
        return Err(TrainError::Config("first batch has no point-pixel pairs to seed the codebook".into()));
    }
    let donors = Matrix::from_vec(donors.len() / c, c, donors)?;
    Ok(Codebook::from_donors(cfg.codebook_size, &donors, cfg.gamma, cfg.codebook_init_noise, derive_seed(cfg.seed, "codebook", 0))?)
}

fn stack(rows: &[Matrix], cols: usize) -> Result<Matrix, AutodiffError> {
    let data: Vec<f64> = rows.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    Matrix::from_vec(data.len() / cols, cols, data)
}

/// Runs the full pretraining loop. Each step takes one batch of scenes,
/// averages their weighted totals, and applies one Adam update.
pub fn pretrain_with(cfg: &TrainConfig, scenes: &[SceneSample], kl: &KlSlot) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::Config("pretraining needs at least one scene".into()));
    }
    let caches = scenes.iter().map(|s| SceneCache::new(s, cfg)).collect::<Result<Vec<_>, _>>()?;
    let model = Model::new(cfg);
    let params = model.named_parameters();
    let mut adam = Adam::default();
    let per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * per_epoch) as u64;
    let schedule_end = total_steps.saturating_sub(1);
    let c = cfg.encoder.channels;
    let mut book: Option<Codebook> = None;
    let mut metrics = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "epoch-order", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            if cfg.quantizes() && book.is_none() {
                book = Some(initial_codebook(&model, &caches, scenes, batch, cfg)?);
            }
            let lr = one_cycle_lr(step, schedule_end, cfg.lr_max);
            model.zero_grad();
            let step_seed = derive_seed(cfg.seed, "step", step);
            let mut total: Option<DiffValue> = None;
            let mut values = [0.0; 6];
            let (mut f2d, mut f3d, mut i2d, mut i3d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let out = scene_step(&model, &caches[i], &scenes[i], book.as_mut(), cfg, kl, derive_seed(step_seed, "scene", i as u64))?;
                let bundle: LossBundle = total_loss(out.terms, cfg.weights).map_err(|e| diverged(step, e, &metrics))?;
                for (v, x) in values.iter_mut().zip(bundle.values) {
                    *v += scale * x;
                }
                let t = bundle.total.scale(scale);
                total = Some(match total {
                    None => t,
                    Some(acc) => acc.add(&t)?,
                });
                f2d.push(out.pair_f2d);
                f3d.push(out.pair_f3d);
                i2d.extend(out.idx_2d);
                i3d.extend(out.idx_3d);
            }
            let total = total.expect("non-empty batch");
            if !total.item().is_finite() {
                return Err(diverged(step, AutodiffError::NonFinite("total loss".into()), &metrics));
            }
            total.backward()?;
            adam.step(&params, lr).map_err(|e| match e {
                TrainError::NonFiniteGradient(name) => diverged(step, AutodiffError::NonFinite(format!("gradient of {name}")), &metrics),
                other => other,
            })?;
            let (joint_usage, perplexity) = match book.as_mut() {
                Some(b) => {
                    let (f2d, f3d) = (stack(&f2d, c)?, stack(&f3d, c)?);
                    ema_update(b, (&f2d, &i2d), (&f3d, &i3d))?;
                    b.record_usage(Modality::Image, &i2d);
                    b.record_usage(Modality::Points, &i3d);
                    if (step + 1) % cfg.revive_every == 0 && f3d.rows() > 0 {
                        let n = revive_dead_codes(b, &f3d, cfg.revive_threshold, derive_seed(cfg.seed, "revive", step))?;
                        if n > 0 {
                            log::debug!("step {step}: revived {n} codewords");
                        }
                    }
                    let s = usage_stats(b);
                    (s.joint_fraction, s.perplexity)
                }
                None => (0.0, 0.0),
            };
            let [nce, commit, rec, occ, orth, kl] = values;
            metrics.push(MetricsRow { step, epoch, lr, nce, commit, rec, occ, orth, kl, total: total.item(), joint_usage, perplexity });
            step += 1;
        }
        if let Some(last) = metrics.last() {
            log::info!("epoch {epoch}: total {:.4} ({})", last.total, TERM_NAMES.iter().zip(last.terms()).map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", "));
        }
    }
    let checkpoint = Checkpoint::new(cfg, &model, book.as_ref(), step);
    Ok(PretrainOutput { model, codebook: book, metrics, checkpoint })
}

fn diverged(step: u64, cause: AutodiffError, metrics: &[MetricsRow]) -> TrainError {
    TrainError::Diverged { step, cause: cause.to_string(), last_row: metrics.last().cloned().map(Box::new) }
}
