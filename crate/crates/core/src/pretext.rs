//! Masked image modelling with geometry substitution, and occupancy estimation.

use std::rc::Rc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix, RowMix};
use crate::encoders::{k_nearest, patchify, ImageGrid};
use crate::nn::{Linear, Parameters};
use crate::seed::rng_for;
use crate::synthdata::{Correspondence, OccupancyQuery};

/// Distance floor in the inverse-distance weights.
pub const IDW_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked_patch_ids: Vec<usize>,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// Nothing masked.
    pub fn empty() -> Self {
        Self { masked_patch_ids: Vec::new(), mask_ratio: 0.0, seed: 0 }
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_patch_ids.binary_search(&patch).is_ok()
    }
}

/// Masks `round(ratio · total)` patches chosen uniformly without replacement.
pub fn make_mask(grid: &ImageGrid, ratio: f64, seed: u64) -> Result<MaskPlan, AutodiffError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AutodiffError::Contract(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let total = grid.n_patches();
    let count = ((ratio * total as f64).round() as usize).min(total);
    let mut rng = rng_for(seed, "mask", 0);
    let mut ids = sample(&mut rng, total, count).into_vec();
    ids.sort_unstable();
    Ok(MaskPlan { masked_patch_ids: ids, mask_ratio: ratio, seed })
}

/// Pairs whose pixel lies in an unmasked patch, in their original order.
pub fn filter_pairs(correspondences: &[Correspondence], plan: &MaskPlan, grid: &ImageGrid) -> Vec<Correspondence> {
    let kept: Vec<Correspondence> =
        correspondences.iter().copied().filter(|c| !plan.is_masked(grid.patch_of_pixel(c.pixel_row, c.pixel_col))).collect();
    if kept.is_empty() && !correspondences.is_empty() {
        log::warn!("every point-pixel pair falls in a masked patch");
    }
    kept
}

/// Row mix over `[f2d; f3d; mask_token]` implementing the substitution.
pub fn substitution_mix(grid: &ImageGrid, plan: &MaskPlan, correspondences: &[Correspondence], n_points: usize) -> Result<RowMix, AutodiffError> {
    let hw = grid.n_pixels();
    let mut hits: Vec<Vec<usize>> = vec![Vec::new(); hw];
    for c in correspondences {
        if c.point_index >= n_points {
            return Err(AutodiffError::Contract(format!("correspondence names point {} of {n_points}", c.point_index)));
        }
        hits[c.pixel_row * grid.width + c.pixel_col].push(c.point_index);
    }
    let token = hw + n_points;
    let rows = (0..hw)
        .map(|px| {
            let patch = grid.patch_of_pixel(px / grid.width, px % grid.width);
            if !plan.is_masked(patch) {
                vec![(px, 1.0)]
            } else if hits[px].is_empty() {
                vec![(token, 1.0)]
            } else {
                let w = 1.0 / hits[px].len() as f64;
                hits[px].iter().map(|&i| (hw + i, w)).collect()
            }
        })
        .collect();
    RowMix::new(hw + n_points + 1, rows)
}

/// Masked pixels take the mean quantised 3D feature of their corresponding
/// points, or the mask token when no point lands there.
pub fn substitute_masked_features(
    f2d_quantized: &DiffValue,
    plan: &MaskPlan,
    correspondences: &[Correspondence],
    f3d_quantized: &DiffValue,
    mask_token: &DiffValue,
    grid: &ImageGrid,
) -> Result<DiffValue, AutodiffError> {
    if f2d_quantized.shape().0 != grid.n_pixels() {
        return Err(AutodiffError::Shape { op: "substitute", lhs: f2d_quantized.shape(), rhs: (grid.n_pixels(), f3d_quantized.shape().1) });
    }
    let mix = substitution_mix(grid, plan, correspondences, f3d_quantized.shape().0)?;
    DiffValue::concat_rows(&[f2d_quantized.clone(), f3d_quantized.clone(), mask_token.clone()])?.row_mix(Rc::new(mix))
}

/// Masked pixels all take the mask token.
pub fn mask_token_fill(f2d_quantized: &DiffValue, plan: &MaskPlan, mask_token: &DiffValue, grid: &ImageGrid) -> Result<DiffValue, AutodiffError> {
    let empty = DiffValue::constant(Matrix::zeros(0, f2d_quantized.shape().1));
    substitute_masked_features(f2d_quantized, plan, &[], &empty, mask_token, grid)
}

/// Linear patch decoder, `2C → p·p·3`.
pub struct ImageDecoderParams {
    pub linear: Linear,
}

/// `(C + 3) → hidden → 1` with a sigmoid output.
pub struct OccupancyDecoderParams {
    pub hidden: Linear,
    pub out: Linear,
}

impl ImageDecoderParams {
    pub fn new(channels: usize, patch: usize, seed: u64) -> Self {
        Self { linear: Linear::new(2 * channels, patch * patch * 3, true, seed, "image_decoder") }
    }
}

impl OccupancyDecoderParams {
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        Self { hidden: Linear::new(channels + 3, hidden, true, seed, "occ_hidden"), out: Linear::new(hidden, 1, true, seed, "occ_out") }
    }

    pub fn predict(&self, pooled: &DiffValue, offsets: &Matrix) -> Result<DiffValue, AutodiffError> {
        let x = DiffValue::concat_cols(&[pooled.clone(), DiffValue::constant(offsets.clone())])?;
        Ok(self.out.forward(&self.hidden.forward(&x)?.relu())?.sigmoid())
    }
}

impl Parameters for ImageDecoderParams {
    fn named_parameters(&self) -> Vec<(String, DiffValue)> {
        let mut out = Vec::new();
        self.linear.collect("image_decoder", &mut out);
        out
    }
}

impl Parameters for OccupancyDecoderParams {
    fn named_parameters(&self) -> Vec<(String, DiffValue)> {
        let mut out = Vec::new();
        self.hidden.collect("occ_hidden", &mut out);
        self.out.collect("occ_out", &mut out);
        out
    }
}

/// Mean over each masked patch's pixels, one output row per masked patch.
pub fn masked_patch_pool(grid: &ImageGrid, plan: &MaskPlan) -> Result<RowMix, AutodiffError> {
    let w = 1.0 / (grid.patch * grid.patch) as f64;
    let rows = plan.masked_patch_ids.iter().map(|&id| grid.pixels_of_patch(id).map(|px| (px, w)).collect()).collect();
    RowMix::new(grid.n_pixels(), rows)
}

/// Mean squared error of the decoded masked patches against the true pixels.
pub fn mim_loss(
    shared: &DiffValue,
    g2d_specific: &DiffValue,
    decoder: &ImageDecoderParams,
    image: &Matrix,
    plan: &MaskPlan,
    grid: &ImageGrid,
) -> Result<DiffValue, AutodiffError> {
    if plan.masked_patch_ids.is_empty() {
        log::warn!("reconstruction loss with nothing masked is defined as 0");
        return Ok(DiffValue::scalar(0.0));
    }
    let pooled = DiffValue::concat_cols(&[shared.clone(), g2d_specific.clone()])?.row_mix(Rc::new(masked_patch_pool(grid, plan)?))?;
    let prediction = decoder.linear.forward(&pooled)?;
    let target = patchify(image, grid, &[])?.select_rows(&plan.masked_patch_ids);
    Ok(prediction.sub(&DiffValue::constant(target))?.square().mean())
}

/// Inverse-distance pooling of `combined` over each query's `k` nearest
/// points. Returns the pooled features (`Q×C`) and the offsets of each query
/// from its neighbours' weighted centroid (`Q×3`).
pub fn occupancy_features(queries: &[[f64; 3]], points: &Matrix, combined: &DiffValue, k: usize) -> Result<(DiffValue, Matrix), AutodiffError> {
    let n = points.rows();
    if n == 0 || k == 0 || combined.shape().0 != n {
        return Err(AutodiffError::Contract(format!("occupancy pooling over {n} points, k = {k}, features {:?}", combined.shape())));
    }
    let k = k.min(n);
    let mut offsets = Matrix::zeros(queries.len(), 3);
    let mut rows = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let d = k_nearest(q, points, k);
        let raw: Vec<f64> = d.iter().map(|(d2, _)| 1.0 / (d2.sqrt() + IDW_EPS)).collect();
        let total: f64 = raw.iter().sum();
        let row: Vec<(usize, f64)> = d.iter().zip(&raw).map(|(&(_, j), &w)| (j, w / total)).collect();
        let mut centroid = [0.0; 3];
        for &(j, w) in &row {
            for c in 0..3 {
                centroid[c] += w * points.get(j, c);
            }
        }
        for c in 0..3 {
            offsets.set(qi, c, q[c] - centroid[c]);
        }
        rows.push(row);
    }
    let pooled = combined.row_mix(Rc::new(RowMix::new(n, rows)?))?;
    Ok((pooled, offsets))
}

/// `−(1/|Q|) Σ o log ô + (1 − o) log(1 − ô)` with logs clamped at 1e-12.
pub fn occupancy_loss(predictions: &DiffValue, labels: &[u8]) -> Result<DiffValue, AutodiffError> {
    if labels.is_empty() {
        return Err(AutodiffError::Contract("occupancy loss needs at least one query".into()));
    }
    if predictions.shape() != (labels.len(), 1) {
        return Err(AutodiffError::Shape { op: "occupancy_loss", lhs: predictions.shape(), rhs: (labels.len(), 1) });
    }
    let o = Matrix::from_vec(labels.len(), 1, labels.iter().map(|&l| l as f64).collect())?;
    let not_o = o.map(|v| 1.0 - v);
    let one = DiffValue::scalar(1.0);
    let pos = predictions.log().mul(&DiffValue::constant(o))?;
    let neg = one.sub(predictions)?.log().mul(&DiffValue::constant(not_o))?;
    Ok(pos.add(&neg)?.mean().scale(-1.0))
}

/// Decoder predictions for a set of queries against one scene.
pub fn predict_occupancy(
    decoder: &OccupancyDecoderParams,
    queries: &[OccupancyQuery],
    points: &Matrix,
    combined: &DiffValue,
    k: usize,
) -> Result<DiffValue, AutodiffError> {
    let positions: Vec<[f64; 3]> = queries.iter().map(|q| q.position).collect();
    let (pooled, offsets) = occupancy_features(&positions, points, combined, k)?;
    decoder.predict(&pooled, &offsets)
}
