use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix};
use crate::codebook::{commitment_loss, quantize, Codebook};
use crate::encoders::{encode_patches, encode_points_with, patchify, project_heads, EncoderParams, FeatureBundle, ImageGrid, PointContext};
use crate::nn::{ParamSnapshot, Parameters};
use crate::objectives::{info_nce, orthogonal_loss, sample_pairs, KlSlot, LossTerms};
use crate::pretext::{
    filter_pairs, make_mask, mask_token_fill, mim_loss, occupancy_loss, occupancy_features, substitute_masked_features, ImageDecoderParams,
    MaskPlan, OccupancyDecoderParams,
};
use crate::seed::derive_seed;
use crate::synthdata::{sample_occupancy_queries, OccupancyQuery, SceneSample};

use super::{TrainConfig, TrainError};

/// Encoders plus both pretext decoders.
pub struct Model {
    pub encoder: EncoderParams,
    pub image_decoder: ImageDecoderParams,
    pub occupancy_decoder: OccupancyDecoderParams,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Self {
        let seed = derive_seed(cfg.seed, "model-init", 0);
        let c = cfg.encoder.channels;
        Self {
            encoder: EncoderParams::new(cfg.encoder.clone(), seed),
            image_decoder: ImageDecoderParams::new(c, cfg.encoder.patch_size, seed),
            occupancy_decoder: OccupancyDecoderParams::new(c, cfg.occupancy_hidden, seed),
        }
    }
}

impl Parameters for Model {
    fn named_parameters(&self) -> Vec<(String, DiffValue)> {
        let mut out = self.encoder.named_parameters();
        out.extend(self.image_decoder.named_parameters());
        out.extend(self.occupancy_decoder.named_parameters());
        out
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: String,
    pub config: TrainConfig,
    pub steps: u64,
    pub parameters: BTreeMap<String, Matrix>,
    pub codebook: Option<Codebook>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &Model, codebook: Option<&Codebook>, steps: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION.into(),
            config: config.clone(),
            steps,
            parameters: model.snapshot().0,
            codebook: codebook.cloned(),
        }
    }

    pub fn model(&self) -> Result<Model, TrainError> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::Version { found: self.schema_version.clone(), expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let model = Model::new(&self.config);
        model.restore(&ParamSnapshot(self.parameters.clone()))?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<Vec<u8>, TrainError> {
        Ok(crate::jsonfmt::to_vec_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, TrainError> {
        let ck: Self = serde_json::from_slice(bytes)?;
        ck.config.validate()?;
        ck.model()?;
        Ok(ck)
    }
}

/// Per-scene constants reused across steps.
pub struct SceneCache {
    pub points: PointContext,
    pub grid: ImageGrid,
}

impl SceneCache {
    pub fn new(sample: &SceneSample, cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(Self {
            points: PointContext::new(&sample.points, cfg.encoder.knn)?,
            grid: ImageGrid::new(sample.image_size(), cfg.encoder.patch_size)?,
        })
    }
}

pub fn encode_scene(model: &Model, cache: &SceneCache, sample: &SceneSample, plan: &MaskPlan) -> Result<FeatureBundle, AutodiffError> {
    let point_latent = encode_points_with(&cache.points, &model.encoder)?;
    let patches = DiffValue::constant(patchify(&sample.image, &cache.grid, &plan.masked_patch_ids)?);
    let patch_latent = encode_patches(&patches, &cache.grid, &model.encoder)?;
    project_heads(&point_latent, &patch_latent, &cache.grid, &model.encoder)
}

/// How masked pixels are filled before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Substitution,
    MaskToken,
}

/// Everything one scene contributes to a step.
pub struct SceneStep {
    pub terms: LossTerms,
    pub features: FeatureBundle,
    /// Detached shared features of the sampled pairs and their codewords.
    pub pair_f2d: Matrix,
    pub pair_f3d: Matrix,
    pub idx_2d: Vec<usize>,
    pub idx_3d: Vec<usize>,
    pub plan: MaskPlan,
}

pub fn scene_mask(cfg: &TrainConfig, cache: &SceneCache, seed: u64) -> Result<MaskPlan, AutodiffError> {
    if cfg.masks_images() {
        make_mask(&cache.grid, cfg.mask_ratio, derive_seed(seed, "mask", 0))
    } else {
        Ok(MaskPlan::empty())
    }
}

pub fn scene_queries(cfg: &TrainConfig, sample: &SceneSample, seed: u64) -> Result<Vec<OccupancyQuery>, TrainError> {
    Ok(sample_occupancy_queries(sample, cfg.n_queries, cfg.occupancy_delta, derive_seed(seed, "queries", 0))?)
}

/// Occupancy probabilities for `queries` against the scene's world-frame points.
///
/// The decoder sees offsets in units of the surface band `occupancy_delta`;
/// in scene-normalized units the band is a few hundredths wide and the
/// decoder barely moves off its initial guess within the training budget.
pub fn occupancy_predictions(
    model: &Model,
    sample: &SceneSample,
    features: &FeatureBundle,
    queries: &[OccupancyQuery],
    cfg: &TrainConfig,
) -> Result<DiffValue, AutodiffError> {
    let f3d = features.f3d_quantized.as_ref().unwrap_or(&features.f3d_shared);
    let combined = f3d.add(&features.g3d_specific)?;
    let positions: Vec<[f64; 3]> = queries.iter().map(|q| q.position).collect();
    let (pooled, offsets) = occupancy_features(&positions, &sample.points, &combined, cfg.occupancy_k)?;
    model.occupancy_decoder.predict(&pooled, &offsets.scale(1.0 / cfg.occupancy_delta))
}

/// Reconstruction loss on the scene's mask with the chosen fill.
pub fn reconstruction_loss(
    model: &Model,
    cache: &SceneCache,
    sample: &SceneSample,
    features: &FeatureBundle,
    plan: &MaskPlan,
    fill: Fill,
) -> Result<DiffValue, AutodiffError> {
    let f2d = features.f2d_quantized.as_ref().unwrap_or(&features.f2d_shared);
    let f3d = features.f3d_quantized.as_ref().unwrap_or(&features.f3d_shared);
    let token = &model.encoder.mask_token;
    let filled = match fill {
        Fill::Substitution => substitute_masked_features(f2d, plan, &sample.correspondences, f3d, token, &cache.grid)?,
        Fill::MaskToken => mask_token_fill(f2d, plan, token, &cache.grid)?,
    };
    mim_loss(&filled, &features.g2d_specific, &model.image_decoder, &sample.image, plan, &cache.grid)
}

/// Forward pass of one scene with every enabled term. `seed` drives the
/// mask, pair and query draws.
pub fn scene_step(
    model: &Model,
    cache: &SceneCache,
    sample: &SceneSample,
    book: Option<&mut Codebook>,
    cfg: &TrainConfig,
    kl: &KlSlot,
    seed: u64,
) -> Result<SceneStep, TrainError> {
    let plan = scene_mask(cfg, cache, seed)?;
    let mut features = encode_scene(model, cache, sample, &plan)?;
    let survivors = filter_pairs(&sample.correspondences, &plan, &cache.grid);
    let pairs = sample_pairs(&survivors, &features.f3d_shared, &features.f2d_shared, &cache.grid, cfg.m_max, derive_seed(seed, "pairs", 0))?;
    let flags = cfg.terms;
    let mut terms = LossTerms::zeros();
    let (mut idx_2d, mut idx_3d) = (Vec::new(), Vec::new());
    let (mut pair_f2d, mut pair_f3d) = (Matrix::zeros(0, cfg.encoder.channels), Matrix::zeros(0, cfg.encoder.channels));

    if let Some(book) = book {
        let (q3, all_3d) = quantize(&features.f3d_shared, book, None)?;
        let (q2, all_2d) = quantize(&features.f2d_shared, book, None)?;
        if let Some(p) = &pairs {
            idx_3d = p.pairs.iter().map(|c| all_3d[c.point_index]).collect();
            idx_2d = p.pairs.iter().map(|c| all_2d[c.pixel_row * cache.grid.width + c.pixel_col]).collect();
            if flags.commit {
                terms.commit = commitment_loss(&p.f2d, &p.f3d, book, cfg.commitment)?;
            }
        }
        features.f3d_quantized = Some(q3);
        features.f2d_quantized = Some(q2);
    }
    if let Some(p) = &pairs {
        pair_f2d = p.f2d.value();
        pair_f3d = p.f3d.value();
        if flags.nce {
            terms.nce = info_nce(&p.f3d, &p.f2d, cfg.tau)?;
        }
    }
    if flags.rec {
        let fill = if cfg.substitution { Fill::Substitution } else { Fill::MaskToken };
        terms.rec = reconstruction_loss(model, cache, sample, &features, &plan, fill)?;
    }
    if flags.occ {
        let queries = scene_queries(cfg, sample, seed)?;
        let labels: Vec<u8> = queries.iter().map(|q| q.occupied).collect();
        terms.occ = occupancy_loss(&occupancy_predictions(model, sample, &features, &queries, cfg)?, &labels)?;
    }
    if flags.orth {
        terms.orth = orthogonal_loss(&features.f2d_shared, &features.g2d_specific, &features.f3d_shared, &features.g3d_specific)?;
    }
    if flags.kl {
        terms.kl = kl.evaluate(&features.g3d_specific, sample)?;
    }
    Ok(SceneStep { terms, features, pair_f2d, pair_f3d, idx_2d, idx_3d, plan })
}
