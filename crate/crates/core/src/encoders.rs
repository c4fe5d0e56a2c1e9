//! Toy point and image encoders with shared and specific projection heads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{squared_distance, AutodiffError, DiffValue, Matrix, RowMix};
use crate::nn::{glorot_uniform, Linear, Parameters};
use crate::synthdata::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden widths of the per-point MLP; the last one is the latent width.
    pub point_widths: Vec<usize>,
    pub knn: usize,
    pub patch_size: usize,
    /// Shared/specific feature width `C`.
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { point_widths: vec![32, 32], knn: 8, patch_size: 4, channels: 16 }
    }
}

impl EncoderConfig {
    pub fn latent_dim(&self) -> usize {
        *self.point_widths.last().expect("at least one point layer")
    }
}

/// Patch grid over an `H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ImageGrid {
    pub fn new(image_size: [usize; 2], patch: usize) -> Result<Self, AutodiffError> {
        let [height, width] = image_size;
        if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
            return Err(AutodiffError::Contract(format!("image {height}x{width} is not divisible into {patch}-pixel patches")));
        }
        Ok(Self { height, width, patch })
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_of_pixel(&self, row: usize, col: usize) -> usize {
        (row / self.patch) * self.grid_cols() + col / self.patch
    }

    /// Pixel indices (row-major) inside patch `id`.
    pub fn pixels_of_patch(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        let (pr, pc) = (id / self.grid_cols(), id % self.grid_cols());
        let p = self.patch;
        (0..p).flat_map(move |dr| (0..p).map(move |dc| (pr * p + dr) * self.width + pc * p + dc))
    }
}

pub struct EncoderParams {
    pub config: EncoderConfig,
    pub point_mlp: Vec<Linear>,
    /// `[h, knn-mean(h)] → latent`.
    pub point_mix: Linear,
    pub patch_embed: Linear,
    pub patch_mlp: Linear,
    pub head_shared_2d: Linear,
    pub head_shared_3d: Linear,
    pub head_specific_2d: Linear,
    pub head_specific_3d: Linear,
    pub mask_token: DiffValue,
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let latent = config.latent_dim();
        let c = config.channels;
        let mut point_mlp = Vec::new();
        let mut fan_in = 3;
        for (i, &w) in config.point_widths.iter().enumerate() {
            point_mlp.push(Linear::new(fan_in, w, true, seed, &format!("point_mlp.{i}")));
            fan_in = w;
        }
        let patch_pixels = config.patch_size * config.patch_size * 3;
        // Shared heads carry no bias so that normalised outputs are invariant
        // to positive rescaling of the latent.
        let patch_embed = Linear::new(patch_pixels, latent, true, seed, "patch_embed");
        // A masked patch enters as zeros and embeds to this bias alone; a zero
        // bias would give whole masked neighbourhoods a zero latent, which the
        // shared head cannot normalise.
        if let Some(b) = &patch_embed.bias {
            *b.data_mut() = glorot_uniform(1, latent, seed, "patch_embed.bias");
        }
        Self {
            point_mix: Linear::new(2 * latent, latent, true, seed, "point_mix"),
            patch_embed,
            patch_mlp: Linear::new(latent, latent, true, seed, "patch_mlp"),
            head_shared_2d: Linear::new(latent, c, false, seed, "head_shared_2d"),
            head_shared_3d: Linear::new(latent, c, false, seed, "head_shared_3d"),
            head_specific_2d: Linear::new(latent, c, false, seed, "head_specific_2d"),
            head_specific_3d: Linear::new(latent, c, false, seed, "head_specific_3d"),
            mask_token: DiffValue::param(Matrix::zeros(1, c)),
            point_mlp,
            config,
        }
    }
}

impl EncoderParams {
    /// Same architecture around caller-supplied leaves, given in
    /// [`Parameters::named_parameters`] order.
    pub fn rebind(&self, leaves: &[DiffValue]) -> Result<Self, AutodiffError> {
        let expected = self.named_parameters().len();
        if leaves.len() != expected {
            return Err(AutodiffError::Contract(format!("{} leaves for {expected} parameters", leaves.len())));
        }
        let mut it = leaves.iter().cloned();
        let mut take = |l: &Linear| Linear { weight: it.next().unwrap(), bias: l.bias.as_ref().map(|_| it.next().unwrap()) };
        let point_mlp = self.point_mlp.iter().map(&mut take).collect();
        Ok(Self {
            config: self.config.clone(),
            point_mlp,
            point_mix: take(&self.point_mix),
            patch_embed: take(&self.patch_embed),
            patch_mlp: take(&self.patch_mlp),
            head_shared_2d: take(&self.head_shared_2d),
            head_shared_3d: take(&self.head_shared_3d),
            head_specific_2d: take(&self.head_specific_2d),
            head_specific_3d: take(&self.head_specific_3d),
            mask_token: it.next().unwrap(),
        })
    }
}

impl Parameters for EncoderParams {
    fn named_parameters(&self) -> Vec<(String, DiffValue)> {
        let mut out = Vec::new();
        for (i, l) in self.point_mlp.iter().enumerate() {
            l.collect(&format!("point_mlp.{i}"), &mut out);
        }
        self.point_mix.collect("point_mix", &mut out);
        self.patch_embed.collect("patch_embed", &mut out);
        self.patch_mlp.collect("patch_mlp", &mut out);
        self.head_shared_2d.collect("head_shared_2d", &mut out);
        self.head_shared_3d.collect("head_shared_3d", &mut out);
        self.head_specific_2d.collect("head_specific_2d", &mut out);
        self.head_specific_3d.collect("head_specific_3d", &mut out);
        out.push(("mask_token".into(), self.mask_token.clone()));
        out
    }
}

pub struct FeatureBundle {
    pub f2d_shared: DiffValue,
    pub f3d_shared: DiffValue,
    pub g2d_specific: DiffValue,
    pub g3d_specific: DiffValue,
    pub f2d_quantized: Option<DiffValue>,
    pub f3d_quantized: Option<DiffValue>,
}

/// Centre and scale that [`normalize_points`] applies: `x ↦ (x − mean) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointFrame {
    pub mean: [f64; 3],
    pub scale: f64,
}

impl PointFrame {
    pub fn of(points: &Matrix) -> Self {
        let n = points.rows().max(1) as f64;
        let mut mean = [0.0; 3];
        for p in points.iter_rows() {
            for k in 0..3 {
                mean[k] += p[k] / n;
            }
        }
        let radius = points
            .iter_rows()
            .map(|p| ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2) + (p[2] - mean[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        Self { mean, scale: if radius > 0.0 { radius } else { 1.0 } }
    }

    pub fn apply(&self, p: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|k| (p[k] - self.mean[k]) / self.scale)
    }
}

/// Zero mean, unit largest radius. A single point maps to the origin.
pub fn normalize_points(points: &Matrix) -> Matrix {
    let frame = PointFrame::of(points);
    let mut out = Matrix::zeros(points.rows(), 3);
    for (r, p) in points.iter_rows().enumerate() {
        out.row_mut(r).copy_from_slice(&frame.apply(p));
    }
    out
}

/// The `k` rows of `points` nearest to `query` as `(squared distance, index)`,
/// nearest first, ties to the lower index.
pub fn k_nearest(query: &[f64], points: &Matrix, k: usize) -> Vec<(f64, usize)> {
    let k = k.min(points.rows());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    if k == 0 {
        return best;
    }
    for (j, p) in points.iter_rows().enumerate() {
        let d = squared_distance(query, p);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        // Scanning in index order, so equal distances keep lower indices first.
        let at = best.partition_point(|e| e.0 <= d);
        best.insert(at, (d, j));
        best.truncate(k);
    }
    best
}

/// Indices of the `k` nearest rows of `coords` to each row (itself included),
/// nearest first, ties to the lower index. Fewer than `k` rows means all of them.
pub fn knn_indices(coords: &Matrix, k: usize) -> Vec<Vec<usize>> {
    coords.iter_rows().map(|q| k_nearest(q, coords, k).into_iter().map(|(_, j)| j).collect()).collect()
}

fn mean_mix(input_rows: usize, groups: Vec<Vec<usize>>) -> Result<RowMix, AutodiffError> {
    RowMix::new(
        input_rows,
        groups
            .into_iter()
            .map(|g| {
                let w = 1.0 / g.len() as f64;
                g.into_iter().map(|j| (j, w)).collect()
            })
            .collect(),
    )
}

/// Per-scene constants of the point branch.
pub struct PointContext {
    pub coords: DiffValue,
    pub knn: Rc<RowMix>,
    pub frame: PointFrame,
}

impl PointContext {
    pub fn new(points: &Matrix, k: usize) -> Result<Self, AutodiffError> {
        if points.rows() == 0 || points.cols() != 3 {
            return Err(AutodiffError::Contract(format!("point cloud of shape {:?}", points.shape())));
        }
        let coords = normalize_points(points);
        let knn = mean_mix(coords.rows(), knn_indices(&coords, k))?;
        Ok(Self { coords: DiffValue::constant(coords), knn: Rc::new(knn), frame: PointFrame::of(points) })
    }
}

pub fn encode_points_with(ctx: &PointContext, params: &EncoderParams) -> Result<DiffValue, AutodiffError> {
    let mut h = ctx.coords.clone();
    for layer in &params.point_mlp {
        h = layer.forward(&h)?.relu();
    }
    let agg = h.row_mix(ctx.knn.clone())?;
    params.point_mix.forward(&DiffValue::concat_cols(&[h, agg])?)
}

/// Per-point latent, `N × latent_dim`.
pub fn encode_points(sample: &SceneSample, params: &EncoderParams) -> Result<DiffValue, AutodiffError> {
    encode_points_with(&PointContext::new(&sample.points, params.config.knn)?, params)
}

/// Flattens each `p×p×3` patch into a row; rows of `masked` patches are zero.
pub fn patchify(image: &Matrix, grid: &ImageGrid, masked: &[usize]) -> Result<Matrix, AutodiffError> {
    if image.shape() != (grid.n_pixels(), 3) {
        return Err(AutodiffError::Shape { op: "patchify", lhs: image.shape(), rhs: (grid.n_pixels(), 3) });
    }
    let width = grid.patch * grid.patch * 3;
    let mut out = Matrix::zeros(grid.n_patches(), width);
    for id in 0..grid.n_patches() {
        if masked.contains(&id) {
            continue;
        }
        let row = out.row_mut(id);
        for (slot, px) in grid.pixels_of_patch(id).enumerate() {
            row[3 * slot..3 * slot + 3].copy_from_slice(image.row(px));
        }
    }
    Ok(out)
}

/// Mean over each patch and its (up to four) edge neighbours.
pub fn neighbour_mix(grid: &ImageGrid) -> Result<RowMix, AutodiffError> {
    let (gr, gc) = (grid.grid_rows() as isize, grid.grid_cols() as isize);
    let groups = (0..gr)
        .flat_map(|r| (0..gc).map(move |c| (r, c)))
        .map(|(r, c)| {
            [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .map(|(dr, dc)| (r + dr, c + dc))
                .filter(|&(rr, cc)| rr >= 0 && rr < gr && cc >= 0 && cc < gc)
                .map(|(rr, cc)| (rr * gc + cc) as usize)
                .collect()
        })
        .collect();
    mean_mix(grid.n_patches(), groups)
}

/// Per-patch latent, `(H/p · W/p) × latent_dim`. Masked patches enter as zeros.
pub fn encode_image(sample: &SceneSample, params: &EncoderParams, masked: &[usize]) -> Result<DiffValue, AutodiffError> {
    let grid = ImageGrid::new(sample.image_size(), params.config.patch_size)?;
    let patches = DiffValue::constant(patchify(&sample.image, &grid, masked)?);
    encode_patches(&patches, &grid, params)
}

pub fn encode_patches(patches: &DiffValue, grid: &ImageGrid, params: &EncoderParams) -> Result<DiffValue, AutodiffError> {
    let embed = params.patch_embed.forward(patches)?;
    // Residual keeps latents of blank patches away from zero.
    let latent = embed.add(&params.patch_mlp.forward(&embed)?.relu())?;
    latent.row_mix(cached_mix(grid, MixKind::Neighbour)?)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum MixKind {
    Neighbour,
    Bilinear,
}

thread_local! {
    static GRID_MIXES: RefCell<HashMap<(ImageGrid, MixKind), Rc<RowMix>>> = RefCell::new(HashMap::new());
}

/// The grid-only mixes are rebuilt for every forward pass otherwise.
fn cached_mix(grid: &ImageGrid, kind: MixKind) -> Result<Rc<RowMix>, AutodiffError> {
    if let Some(m) = GRID_MIXES.with(|c| c.borrow().get(&(*grid, kind)).cloned()) {
        return Ok(m);
    }
    let mix = Rc::new(match kind {
        MixKind::Neighbour => neighbour_mix(grid)?,
        MixKind::Bilinear => bilinear_mix(grid)?,
    });
    GRID_MIXES.with(|c| c.borrow_mut().insert((*grid, kind), mix.clone()));
    Ok(mix)
}

/// Linear interpolation weights along one axis, half-pixel centres
/// (align-corners false), edges clamped.
pub fn bilinear_weights_1d(out_index: usize, factor: usize, n_in: usize) -> [(usize, f64); 2] {
    let s = ((out_index as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    let w = s - i0 as f64;
    [(i0, 1.0 - w), (i1, w)]
}

pub fn bilinear_mix(grid: &ImageGrid) -> Result<RowMix, AutodiffError> {
    let (gr, gc, p) = (grid.grid_rows(), grid.grid_cols(), grid.patch);
    let mut rows = Vec::with_capacity(grid.n_pixels());
    for y in 0..grid.height {
        let wy = bilinear_weights_1d(y, p, gr);
        for x in 0..grid.width {
            let wx = bilinear_weights_1d(x, p, gc);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(iy, ay) in &wy {
                for &(ix, ax) in &wx {
                    let j = iy * gc + ix;
                    match entries.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += ay * ax,
                        None => entries.push((j, ay * ax)),
                    }
                }
            }
            entries.retain(|e| e.1 != 0.0);
            rows.push(entries);
        }
    }
    RowMix::new(grid.n_patches(), rows)
}

/// Bilinear upsampling from the patch grid to pixel resolution.
pub fn upsample_bilinear(patch_features: &DiffValue, grid: &ImageGrid, factor: usize) -> Result<DiffValue, AutodiffError> {
    if factor != grid.patch {
        return Err(AutodiffError::Contract(format!("upsampling factor {factor} must equal the patch size {}", grid.patch)));
    }
    patch_features.row_mix(cached_mix(grid, MixKind::Bilinear)?)
}

/// Shared (normalised) and specific heads for both modalities.
///
/// The 2D heads are bias-free linear maps and so commute with bilinear
/// upsampling; they run on the patch grid and the `C`-wide result is
/// upsampled, which is the same function at a fraction of the cost.
pub fn project_heads(point_latent: &DiffValue, patch_latent: &DiffValue, grid: &ImageGrid, params: &EncoderParams) -> Result<FeatureBundle, AutodiffError> {
    let up = |head: &Linear| upsample_bilinear(&head.forward(patch_latent)?, grid, grid.patch);
    Ok(FeatureBundle {
        f2d_shared: up(&params.head_shared_2d)?.l2_normalize_rows()?,
        f3d_shared: params.head_shared_3d.forward(point_latent)?.l2_normalize_rows()?,
        g2d_specific: up(&params.head_specific_2d)?,
        g3d_specific: params.head_specific_3d.forward(point_latent)?,
        f2d_quantized: None,
        f3d_quantized: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synthdata::{generate_scene, SceneConfig};

    fn jitter((r, c): (usize, usize), salt: usize) -> Matrix {
        Matrix::from_fn(r, c, |i, j| 0.1 * ((i * 31 + j * 17 + salt * 7) as f64 * 0.61).sin())
    }

    fn small_params(seed: u64) -> EncoderParams {
        EncoderParams::new(EncoderConfig { point_widths: vec![5, 4], knn: 3, patch_size: 2, channels: 3 }, seed)
    }

    #[test]
    fn grid_arithmetic() {
        let g = ImageGrid::new([32, 32], 4).unwrap();
        assert_eq!(g.n_patches(), 64);
        assert_eq!(g.patch_of_pixel(5, 9), 8 + 2);
        assert_eq!(g.pixels_of_patch(9).collect::<Vec<_>>()[..2], [4 * 32 + 4, 4 * 32 + 5]);
        assert!(ImageGrid::new([30, 32], 4).is_err());
    }

    #[test]
    fn image_encoder_shape_and_constant_symmetry() {
        let params = EncoderParams::new(EncoderConfig::default(), 3);
        let mut s = generate_scene(&SceneConfig::default(), 1).unwrap();
        s.image = Matrix::filled(32 * 32, 3, 0.4);
        let z = encode_image(&s, &params, &[]).unwrap().value();
        assert_eq!(z.shape(), (64, 32));
        for r in 1..64 {
            for c in 0..32 {
                assert!((z.get(r, c) - z.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_cloud() {
        let params = EncoderParams::new(EncoderConfig::default(), 3);
        let ctx = PointContext::new(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]), 8).unwrap();
        let z = encode_points_with(&ctx, &params).unwrap().value();
        assert_eq!(z.shape(), (1, 32));
        assert!(z.all_finite());
    }

    #[test]
    fn point_encoder_is_permutation_equivariant() {
        let params = EncoderParams::new(EncoderConfig::default(), 3);
        let s = generate_scene(&SceneConfig { n_rays: 60, ..SceneConfig::default() }, 2).unwrap();
        let n = s.n_points();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let z = encode_points_with(&PointContext::new(&s.points, 8).unwrap(), &params).unwrap().value();
        let zp = encode_points_with(&PointContext::new(&s.points.select_rows(&perm), 8).unwrap(), &params).unwrap().value();
        for (i, &j) in perm.iter().enumerate() {
            for c in 0..32 {
                assert!((zp.get(i, c) - z.get(j, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_includes_self_and_caps_at_n() {
        let pts = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(knn_indices(&pts, 2), vec![vec![0, 1], vec![1, 0], vec![2, 1]]);
        assert_eq!(knn_indices(&pts, 8)[2], vec![2, 1, 0]);
    }

    #[test]
    fn upsampling_cases() {
        let g = ImageGrid::new([8, 8], 4).unwrap();
        let x = DiffValue::constant(Matrix::filled(4, 2, 1.5));
        let up = upsample_bilinear(&x, &g, 4).unwrap().value();
        assert!(up.as_slice().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(upsample_bilinear(&x, &g, 2).is_err());
        // Nodes 0 and 1 along a row: the two pixels straddling the midpoint
        // average to 0.5 and are mirror images of each other.
        let x = DiffValue::constant(Matrix::from_rows(&[[0.0], [1.0], [0.0], [1.0]]));
        let up = upsample_bilinear(&x, &g, 4).unwrap().value();
        assert_eq!(up.get(3, 0) + up.get(4, 0), 1.0);
        assert_eq!(up.get(3, 0), 1.0 - up.get(4, 0));
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(7, 0), 1.0);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let g = ImageGrid::new([32, 32], 4).unwrap();
        let mix = bilinear_mix(&g).unwrap();
        for row in (0..mix.output_rows()).map(|i| mix.row(i)) {
            assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_features_are_unit_and_scale_invariant() {
        let params = EncoderParams::new(EncoderConfig::default(), 5);
        let s = generate_scene(&SceneConfig::default(), 4).unwrap();
        let grid = ImageGrid::new([32, 32], 4).unwrap();
        let pl = encode_points(&s, &params).unwrap();
        let il = encode_image(&s, &params, &[]).unwrap();
        let b = project_heads(&pl, &il, &grid, &params).unwrap();
        assert_eq!(b.f2d_shared.shape(), (1024, 16));
        assert_eq!(b.f3d_shared.shape(), (s.n_points(), 16));
        for f in [&b.f2d_shared, &b.f3d_shared] {
            for row in f.value().iter_rows() {
                assert!((crate::autodiff::dot(row, row).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let b2 = project_heads(&pl.scale(3.7), &il.scale(3.7), &grid, &params).unwrap();
        let diff = b2.f3d_shared.value().zip_map(&b.f3d_shared.value(), |a, b| (a - b).abs()).max_abs();
        assert!(diff < 1e-9);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let params = small_params(9);
        let s = generate_scene(&SceneConfig { n_rays: 12, image_size: [4, 4], focal: 3.5, ..SceneConfig::default() }, 2).unwrap();
        let grid = ImageGrid::new([4, 4], 2).unwrap();
        let ctx = PointContext::new(&s.points, 3).unwrap();
        let patches = DiffValue::constant(patchify(&s.image, &grid, &[1]).unwrap());
        // Zero biases would put the blank patch exactly on a relu kink.
        let values: Vec<Matrix> =
            params.parameters().iter().enumerate().map(|(i, p)| p.value().zip_map(&jitter(p.shape(), i), |a, b| a + b)).collect();
        let probe_pts = Matrix::from_fn(s.n_points(), 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let probe_px = Matrix::from_fn(16, 3, |r, c| ((r * 5 + c) as f64 * 0.23).cos());
        let check = gradcheck::check(&values, |leaves| {
            let m = params.rebind(leaves)?;
            let pl = encode_points_with(&ctx, &m)?;
            let il = encode_patches(&patches, &grid, &m)?;
            let b = project_heads(&pl, &il, &grid, &m)?;
            let a = b.f3d_shared.add(&b.g3d_specific)?.mul(&DiffValue::constant(probe_pts.clone()))?.sum();
            let c = b.f2d_shared.add(&b.g2d_specific)?.mul(&DiffValue::constant(probe_px.clone()))?.sum();
            Ok(a.add(&c)?)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn heads_commute_with_upsampling() {
        let params = EncoderParams::new(EncoderConfig::default(), 4);
        let grid = ImageGrid::new([32, 32], 4).unwrap();
        let latent = DiffValue::constant(jitter((64, 32), 3));
        let late = params.head_specific_2d.forward(&upsample_bilinear(&latent, &grid, 4).unwrap()).unwrap();
        let early = upsample_bilinear(&params.head_specific_2d.forward(&latent).unwrap(), &grid, 4).unwrap();
        assert!(late.value().zip_map(&early.value(), |a, b| a - b).max_abs() < 1e-12);
    }
}
