//! Post-training measurements on held-out scenes.

use serde::{Deserialize, Serialize};

use crate::codebook::{quantize, usage_stats, Codebook, Modality, UsageStats};
use crate::objectives::{orthogonal_term, sample_pairs};
use crate::pretext::{make_mask, MaskPlan};
use crate::seed::derive_seed;
use crate::synthdata::SceneSample;

use super::model::{encode_scene, occupancy_predictions, reconstruction_loss, scene_queries, Fill, Model, SceneCache};
use super::{TrainConfig, TrainError};

/// Codebook usage of held-out pairs, counted on a clone with zeroed counters.
pub fn joint_usage(model: &Model, book: &Codebook, cfg: &TrainConfig, scenes: &[SceneSample], seed: u64) -> Result<UsageStats, TrainError> {
    let mut probe = book.clone();
    probe.reset_usage();
    for (i, s) in scenes.iter().enumerate() {
        let cache = SceneCache::new(s, cfg)?;
        let f = encode_scene(model, &cache, s, &MaskPlan::empty())?;
        let scene_seed = derive_seed(seed, "usage-pairs", i as u64);
        if let Some(p) = sample_pairs(&s.correspondences, &f.f3d_shared, &f.f2d_shared, &cache.grid, cfg.m_max, scene_seed)? {
            quantize(&p.f2d, &mut probe, Some(Modality::Image))?;
            quantize(&p.f3d, &mut probe, Some(Modality::Points))?;
        }
    }
    Ok(usage_stats(&probe))
}

/// Mean masked-patch reconstruction MSE over `scenes` with a fresh mask per scene.
pub fn reconstruction_mse(
    model: &Model,
    book: Option<&Codebook>,
    cfg: &TrainConfig,
    scenes: &[SceneSample],
    fill: Fill,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut book = book.cloned();
    let mut total = 0.0;
    for (i, s) in scenes.iter().enumerate() {
        let cache = SceneCache::new(s, cfg)?;
        let plan = make_mask(&cache.grid, cfg.mask_ratio, derive_seed(seed, "eval-mask", i as u64))?;
        let mut f = encode_scene(model, &cache, s, &plan)?;
        if let Some(b) = book.as_mut() {
            f.f3d_quantized = Some(quantize(&f.f3d_shared, b, None)?.0);
            f.f2d_quantized = Some(quantize(&f.f2d_shared, b, None)?.0);
        }
        total += reconstruction_loss(model, &cache, s, &f, &plan, fill)?.item();
    }
    Ok(total / scenes.len().max(1) as f64)
}

/// Fraction of fresh queries whose thresholded prediction matches the label.
pub fn occupancy_accuracy(model: &Model, book: Option<&Codebook>, cfg: &TrainConfig, scenes: &[SceneSample], seed: u64) -> Result<f64, TrainError> {
    let mut book = book.cloned();
    let (mut hits, mut count) = (0usize, 0usize);
    for (i, s) in scenes.iter().enumerate() {
        let cache = SceneCache::new(s, cfg)?;
        let mut f = encode_scene(model, &cache, s, &MaskPlan::empty())?;
        if let Some(b) = book.as_mut() {
            f.f3d_quantized = Some(quantize(&f.f3d_shared, b, None)?.0);
        }
        let queries = scene_queries(cfg, s, derive_seed(seed, "eval-queries", i as u64))?;
        let pred = occupancy_predictions(model, s, &f, &queries, cfg)?;
        let pred = pred.data();
        for (q, &p) in queries.iter().zip(pred.as_slice()) {
            hits += usize::from((p > 0.5) == (q.occupied == 1));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { hits as f64 / count as f64 })
}

/// `‖FᵀG‖_F / m` per modality, averaged over scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthNorms {
    pub image: f64,
    pub points: f64,
}

pub fn orthogonality_norms(model: &Model, cfg: &TrainConfig, scenes: &[SceneSample]) -> Result<OrthNorms, TrainError> {
    let (mut image, mut points) = (0.0, 0.0);
    for s in scenes {
        let cache = SceneCache::new(s, cfg)?;
        let f = encode_scene(model, &cache, s, &MaskPlan::empty())?;
        image += orthogonal_term(&f.f2d_shared, &f.g2d_specific)?.item().sqrt();
        points += orthogonal_term(&f.f3d_shared, &f.g3d_specific)?.item().sqrt();
    }
    let n = scenes.len().max(1) as f64;
    Ok(OrthNorms { image: image / n, points: points / n })
}
