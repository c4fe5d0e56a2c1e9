//! Contrastive, orthogonality and aggregate objectives.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix};
use crate::encoders::ImageGrid;
use crate::seed::rng_for;
use crate::synthdata::{Correspondence, SceneSample};

/// Point-to-pixel InfoNCE with 3D anchors and the batch's 2D rows as negatives.
pub fn info_nce(f3d_pairs: &DiffValue, f2d_pairs: &DiffValue, tau: f64) -> Result<DiffValue, AutodiffError> {
    if f3d_pairs.shape() != f2d_pairs.shape() {
        return Err(AutodiffError::Shape { op: "info_nce", lhs: f3d_pairs.shape(), rhs: f2d_pairs.shape() });
    }
    let m = f3d_pairs.shape().0;
    if m < 2 {
        return Err(AutodiffError::Contract(format!("InfoNCE needs at least 2 pairs, got {m}")));
    }
    if !(tau > 0.0) {
        return Err(AutodiffError::Contract(format!("temperature {tau} must be positive")));
    }
    let logits = f3d_pairs.matmul(&f2d_pairs.transpose())?.scale(1.0 / tau);
    let diagonal = DiffValue::constant(Matrix::identity(m));
    Ok(logits.log_softmax_rows().mul(&diagonal)?.sum().scale(-1.0 / m as f64))
}

/// Gathered pair features and the pairs they came from.
pub struct PairSample {
    pub f3d: DiffValue,
    pub f2d: DiffValue,
    pub pairs: Vec<Correspondence>,
}

/// Up to `m_max` surviving pairs, drawn without replacement in seeded order.
/// Fewer than two survivors gives `None`.
pub fn sample_pairs(
    survivors: &[Correspondence],
    f3d_shared: &DiffValue,
    f2d_shared: &DiffValue,
    grid: &ImageGrid,
    m_max: usize,
    seed: u64,
) -> Result<Option<PairSample>, AutodiffError> {
    if survivors.len() < 2 || m_max < 2 {
        return Ok(None);
    }
    let mut rng = rng_for(seed, "pairs", 0);
    let pairs: Vec<Correspondence> = sample(&mut rng, survivors.len(), m_max.min(survivors.len())).into_iter().map(|i| survivors[i]).collect();
    let points: Vec<usize> = pairs.iter().map(|c| c.point_index).collect();
    let pixels: Vec<usize> = pairs.iter().map(|c| c.pixel_row * grid.width + c.pixel_col).collect();
    Ok(Some(PairSample { f3d: f3d_shared.select_rows(&points)?, f2d: f2d_shared.select_rows(&pixels)?, pairs }))
}

/// `‖(F/√m)ᵀ (G/√m)‖²_F` for one modality.
pub fn orthogonal_term(f_shared: &DiffValue, g_specific: &DiffValue) -> Result<DiffValue, AutodiffError> {
    if f_shared.shape().0 != g_specific.shape().0 {
        return Err(AutodiffError::Shape { op: "orthogonal_loss", lhs: f_shared.shape(), rhs: g_specific.shape() });
    }
    let m = f_shared.shape().0.max(1) as f64;
    Ok(f_shared.transpose().matmul(g_specific)?.square().sum().scale(1.0 / (m * m)))
}

/// Sum of [`orthogonal_term`] over the 2D and 3D feature pairs.
pub fn orthogonal_loss(f2d: &DiffValue, g2d: &DiffValue, f3d: &DiffValue, g3d: &DiffValue) -> Result<DiffValue, AutodiffError> {
    orthogonal_term(f2d, g2d)?.add(&orthogonal_term(f3d, g3d)?)
}

/// A pluggable auxiliary loss on the 3D specific features.
pub trait AuxiliaryLoss {
    fn loss(&self, g3d_specific: &DiffValue, scene: &SceneSample) -> Result<DiffValue, AutodiffError>;
}

/// Holds at most one registered auxiliary loss; empty means the constant 0.
#[derive(Default)]
pub struct KlSlot {
    imp: Option<Box<dyn AuxiliaryLoss>>,
}

impl KlSlot {
    pub fn register(&mut self, imp: Box<dyn AuxiliaryLoss>) {
        self.imp = Some(imp);
    }

    pub fn unregister(&mut self) {
        self.imp = None;
    }

    pub fn is_registered(&self) -> bool {
        self.imp.is_some()
    }

    pub fn evaluate(&self, g3d_specific: &DiffValue, scene: &SceneSample) -> Result<DiffValue, AutodiffError> {
        let Some(imp) = &self.imp else {
            return Ok(DiffValue::scalar(0.0));
        };
        let v = imp.loss(g3d_specific, scene)?;
        if v.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(v.shape().0, v.shape().1));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(AutodiffError::NonFinite("auxiliary loss".into()));
        }
        if x < 0.0 {
            return Err(AutodiffError::Contract(format!("auxiliary loss returned {x} < 0")));
        }
        Ok(v)
    }
}

pub const TERM_NAMES: [&str; 6] = ["nce", "commit", "rec", "occ", "orth", "kl"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nce: f64,
    pub commit: f64,
    pub rec: f64,
    pub occ: f64,
    pub orth: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nce: 1.0, commit: 1.0, rec: 1.0, occ: 1.0, orth: 1.0, kl: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.nce, self.commit, self.rec, self.occ, self.orth, self.kl]
    }
}

/// The six terms, in [`TERM_NAMES`] order.
#[derive(Clone)]
pub struct LossTerms {
    pub nce: DiffValue,
    pub commit: DiffValue,
    pub rec: DiffValue,
    pub occ: DiffValue,
    pub orth: DiffValue,
    pub kl: DiffValue,
}

impl LossTerms {
    pub fn zeros() -> Self {
        let z = || DiffValue::scalar(0.0);
        Self { nce: z(), commit: z(), rec: z(), occ: z(), orth: z(), kl: z() }
    }

    pub fn as_array(&self) -> [&DiffValue; 6] {
        [&self.nce, &self.commit, &self.rec, &self.occ, &self.orth, &self.kl]
    }
}

pub struct LossBundle {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: DiffValue,
    /// Detached term values for logging, in [`TERM_NAMES`] order.
    pub values: [f64; 6],
}

/// `Σ_t w_t · term_t`; fails on the first non-finite or non-scalar term.
pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBundle, AutodiffError> {
    let mut values = [0.0; 6];
    let mut total: Option<DiffValue> = None;
    for (i, (term, w)) in terms.as_array().into_iter().zip(weights.as_array()).enumerate() {
        if term.shape() != (1, 1) {
            return Err(AutodiffError::Contract(format!("loss term {} has shape {:?}", TERM_NAMES[i], term.shape())));
        }
        values[i] = term.item();
        if !values[i].is_finite() {
            return Err(AutodiffError::NonFinite(format!("loss term {}", TERM_NAMES[i])));
        }
        let scaled = term.scale(w);
        total = Some(match total {
            None => scaled,
            Some(t) => t.add(&scaled)?,
        });
    }
    let total = total.expect("six terms");
    if !total.item().is_finite() {
        return Err(AutodiffError::NonFinite("total loss".into()));
    }
    Ok(LossBundle { terms, weights, total, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn nce_closed_forms() {
        let row = Matrix::from_rows(&[[0.6, 0.8]]);
        let same = DiffValue::constant(Matrix::from_fn(4, 2, |_, c| row.get(0, c)));
        let l = info_nce(&same, &same, 0.07).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-9);
        let e = DiffValue::constant(Matrix::identity(2));
        let l = info_nce(&e, &e, 1.0).unwrap().item();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);
        assert!(info_nce(&DiffValue::constant(row.clone()), &DiffValue::constant(row), 1.0).is_err());
    }

    #[test]
    fn nce_decreases_towards_aligned_pairs() {
        // Interpolate the 2D rows from a constant row towards the 3D rows.
        let f3 = Matrix::identity(3);
        let c = Matrix::filled(3, 3, 1.0 / 3f64.sqrt());
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let f2 = c.zip_map(&f3, |a, b| (1.0 - t) * a + t * b);
            let l = info_nce(&DiffValue::constant(f3.clone()), &DiffValue::constant(f2).l2_normalize_rows().unwrap(), 0.5).unwrap().item();
            assert!(l <= last + 1e-15 && l >= 0.0);
            last = l;
        }
    }

    #[test]
    fn pair_sampling() {
        let s = generate_scene(&SceneConfig::default(), 2).unwrap();
        let grid = ImageGrid::new([32, 32], 4).unwrap();
        let f3 = DiffValue::constant(Matrix::from_fn(s.n_points(), 2, |r, _| r as f64));
        let f2 = DiffValue::constant(Matrix::from_fn(1024, 2, |r, _| r as f64));
        let a = sample_pairs(&s.correspondences, &f3, &f2, &grid, 256, 4).unwrap().unwrap();
        assert_eq!(a.pairs.len(), 256);
        let b = sample_pairs(&s.correspondences, &f3, &f2, &grid, 256, 4).unwrap().unwrap();
        assert_eq!(a.pairs, b.pairs);
        for (i, c) in a.pairs.iter().enumerate() {
            assert_eq!(a.f3d.value().get(i, 0), c.point_index as f64);
            assert_eq!(a.f2d.value().get(i, 0), (c.pixel_row * 32 + c.pixel_col) as f64);
        }
        let few = &s.correspondences[..5];
        let all = sample_pairs(few, &f3, &f2, &grid, 256, 4).unwrap().unwrap();
        let mut got: Vec<usize> = all.pairs.iter().map(|c| c.point_index).collect();
        got.sort_unstable();
        assert_eq!(got, few.iter().map(|c| c.point_index).collect::<Vec<_>>());
        assert!(sample_pairs(&s.correspondences[..1], &f3, &f2, &grid, 256, 4).unwrap().is_none());
    }

    #[test]
    fn orthogonal_cases() {
        let f = DiffValue::constant(Matrix::from_rows(&[[1.0], [1.0]]));
        let g = DiffValue::constant(Matrix::from_rows(&[[1.0], [-1.0]]));
        assert_eq!(orthogonal_term(&f, &g).unwrap().item(), 0.0);
        // Orthonormal columns against themselves: ‖I‖² = C before the 1/m² scaling.
        let q = DiffValue::constant(Matrix::from_rows(&[[0.6, 0.8], [-0.8, 0.6], [0.0, 0.0]]));
        let m = 3.0;
        assert!((orthogonal_term(&q, &q).unwrap().item() * m * m - 2.0).abs() < 1e-12);
    }

    struct Half;
    impl AuxiliaryLoss for Half {
        fn loss(&self, _: &DiffValue, _: &SceneSample) -> Result<DiffValue, AutodiffError> {
            Ok(DiffValue::scalar(0.5))
        }
    }

    struct Broken;
    impl AuxiliaryLoss for Broken {
        fn loss(&self, _: &DiffValue, _: &SceneSample) -> Result<DiffValue, AutodiffError> {
            Ok(DiffValue::scalar(f64::NAN))
        }
    }

    #[test]
    fn kl_slot_contract() {
        let s = generate_scene(&SceneConfig { n_rays: 16, ..SceneConfig::default() }, 1).unwrap();
        let g = DiffValue::constant(Matrix::zeros(s.n_points(), 4));
        let mut slot = KlSlot::default();
        assert_eq!(slot.evaluate(&g, &s).unwrap().item(), 0.0);
        slot.register(Box::new(Half));
        let mut terms = LossTerms::zeros();
        terms.nce = DiffValue::scalar(1.0);
        terms.kl = slot.evaluate(&g, &s).unwrap();
        let w = LossWeights { kl: 2.0, ..LossWeights::default() };
        assert_eq!(total_loss(terms, w).unwrap().total.item(), 2.0);
        slot.register(Box::new(Broken));
        assert!(matches!(slot.evaluate(&g, &s), Err(AutodiffError::NonFinite(_))));
        slot.unregister();
        assert_eq!(slot.evaluate(&g, &s).unwrap().item(), 0.0);
    }

    #[test]
    fn total_arithmetic_and_errors() {
        assert_eq!(total_loss(LossTerms::zeros(), LossWeights::default()).unwrap().total.item(), 0.0);
        let s = |v| DiffValue::scalar(v);
        let terms = LossTerms { nce: s(1.0), commit: s(2.0), rec: s(3.0), occ: s(4.0), orth: s(5.0), kl: s(0.0) };
        let b = total_loss(terms, LossWeights::default()).unwrap();
        assert_eq!(b.total.item(), 15.0);
        assert_eq!(b.values, [1.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
        let mut terms = LossTerms::zeros();
        terms.occ = s(f64::INFINITY);
        match total_loss(terms, LossWeights::default()) {
            Err(AutodiffError::NonFinite(t)) => assert!(t.contains("occ")),
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn objective_gradients() {
        let inputs = vec![
            Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.9).sin()),
            Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.5).cos()),
            Matrix::from_fn(5, 3, |r, c| ((r + c) as f64 * 1.7).sin()),
        ];
        let check = gradcheck::check(&inputs, |x| {
            let a = x[0].l2_normalize_rows()?;
            let b = x[1].l2_normalize_rows()?;
            let nce = info_nce(&a, &b, 0.3)?;
            let orth = orthogonal_loss(&b, &x[2], &a, &x[2])?;
            let mut terms = LossTerms::zeros();
            terms.nce = nce;
            terms.orth = orth;
            Ok(total_loss(terms, LossWeights { orth: 0.7, ..LossWeights::default() })?.total)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }
}
