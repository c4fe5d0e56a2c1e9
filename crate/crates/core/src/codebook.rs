//! Unified cross-modal codebook: nearest-codeword quantisation, EMA updates,
//! commitment losses and usage bookkeeping.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, squared_distance, AutodiffError, DiffValue, Matrix};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "2d")]
    Image,
    #[serde(rename = "3d")]
    Points,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Matrix,
    pub gamma: f64,
    pub usage_2d: Vec<u64>,
    pub usage_3d: Vec<u64>,
    pub steps_since_use: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Matrix, gamma: f64) -> Result<Self, AutodiffError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(AutodiffError::Contract(format!("gamma {gamma} must lie in (0, 1)")));
        }
        if entries.rows() == 0 || !entries.all_finite() {
            return Err(AutodiffError::Contract("codebook entries must be non-empty and finite".into()));
        }
        let v = entries.rows();
        Ok(Self { entries, gamma, usage_2d: vec![0; v], usage_3d: vec![0; v], steps_since_use: vec![0; v] })
    }

    /// `size` rows drawn from `donors` (without replacement while possible)
    /// plus Gaussian noise of standard deviation `noise`.
    pub fn from_donors(size: usize, donors: &Matrix, gamma: f64, noise: f64, seed: u64) -> Result<Self, AutodiffError> {
        if donors.rows() == 0 {
            return Err(AutodiffError::Contract("no donor features to initialise the codebook".into()));
        }
        let mut rng = rng_for(seed, "codebook-init", 0);
        let normal = Normal::new(0.0, noise).map_err(|e| AutodiffError::Contract(e.to_string()))?;
        let mut pool: Vec<usize> = Vec::new();
        let mut entries = Matrix::zeros(size, donors.cols());
        for v in 0..size {
            if pool.is_empty() {
                pool = (0..donors.rows()).collect();
            }
            let j = pool.swap_remove(rng.random_range(0..pool.len()));
            for (e, &d) in entries.row_mut(v).iter_mut().zip(donors.row(j)) {
                *e = d + normal.sample(&mut rng);
            }
        }
        Self::new(entries, gamma)
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Nearest codeword per row, ties to the lowest index.
    pub fn nearest(&self, features: &Matrix) -> Vec<usize> {
        nearest_rows(&self.entries, features)
    }

    pub fn record_usage(&mut self, modality: Modality, indices: &[usize]) {
        let counts = match modality {
            Modality::Image => &mut self.usage_2d,
            Modality::Points => &mut self.usage_3d,
        };
        for &i in indices {
            counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_2d.iter_mut().for_each(|c| *c = 0);
        self.usage_3d.iter_mut().for_each(|c| *c = 0);
    }
}

/// Index of the nearest row of `entries` for every row of `features`; ties go
/// to the lowest index.
///
/// Distances are first ranked through `‖f‖² + ‖e‖² − 2 f·e`, one matrix
/// product for the whole batch. That form carries rounding error, so every
/// codeword within a generous margin of the best is re-scored with the exact
/// squared distance before choosing.
pub fn nearest_rows(entries: &Matrix, features: &Matrix) -> Vec<usize> {
    let norms: Vec<f64> = entries.iter_rows().map(|e| dot(e, e)).collect();
    let largest = norms.iter().copied().fold(0.0, f64::max);
    let cross = features.matmul_nt(entries);
    features
        .iter_rows()
        .zip(cross.iter_rows())
        .map(|(f, fe)| {
            let ff = dot(f, f);
            let approx: Vec<f64> = norms.iter().zip(fe).map(|(ee, x)| ff + ee - 2.0 * x).collect();
            let floor = approx.iter().copied().fold(f64::INFINITY, f64::min);
            let margin = 1e-9 * (ff + largest) + f64::MIN_POSITIVE;
            let mut best = (f64::INFINITY, 0);
            for (k, &a) in approx.iter().enumerate() {
                if a <= floor + margin {
                    let d = squared_distance(f, entries.row(k));
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            best.1
        })
        .collect()
}

/// Replaces each row by its nearest codeword in the forward pass while
/// passing gradients straight through to `features`.
pub fn quantize(features: &DiffValue, book: &mut Codebook, usage: Option<Modality>) -> Result<(DiffValue, Vec<usize>), AutodiffError> {
    let (m, c) = features.shape();
    if c != book.dim() {
        return Err(AutodiffError::Shape { op: "quantize", lhs: (m, c), rhs: book.entries.shape() });
    }
    let indices = book.nearest(&features.data());
    let quantized = features.straight_through(book.entries.select_rows(&indices))?;
    if let Some(modality) = usage {
        book.record_usage(modality, &indices);
    }
    Ok((quantized, indices))
}

/// One EMA step with the batch's assignments: each used codeword moves to
/// `γ·e + (1−γ)·mean(assigned features of both modalities)`.
pub fn ema_update(book: &mut Codebook, batch_2d: (&Matrix, &[usize]), batch_3d: (&Matrix, &[usize])) -> Result<(), AutodiffError> {
    let (v, c) = book.entries.shape();
    let mut sums = Matrix::zeros(v, c);
    let mut counts = vec![0usize; v];
    for (features, indices) in [batch_2d, batch_3d] {
        if features.rows() != indices.len() || (features.rows() > 0 && features.cols() != c) {
            return Err(AutodiffError::Shape { op: "ema_update", lhs: features.shape(), rhs: (indices.len(), c) });
        }
        for (row, &k) in features.iter_rows().zip(indices) {
            if k >= v {
                return Err(AutodiffError::Contract(format!("codeword index {k} out of {v}")));
            }
            counts[k] += 1;
            for (s, &x) in sums.row_mut(k).iter_mut().zip(row) {
                *s += x;
            }
        }
    }
    let g = book.gamma;
    for k in 0..v {
        if counts[k] == 0 {
            book.steps_since_use[k] += 1;
            continue;
        }
        book.steps_since_use[k] = 0;
        let w = (1.0 - g) / counts[k] as f64;
        let sum = sums.row(k).to_vec();
        for (e, s) in book.entries.row_mut(k).iter_mut().zip(sum) {
            *e = g * *e + w * s;
        }
    }
    Ok(())
}

/// Which codeword each modality commits to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitmentMode {
    /// Both features of a pair commit to the codeword nearest the 3D feature.
    #[default]
    Anchored3d,
    /// Each feature commits to its own nearest codeword.
    PerModality,
}

/// Commitment loss against codebook `entries`, which receive no gradient.
///
/// `(1/M) Σ_i ‖F²ᴰ_i − sg[e_a]‖² + ‖F³ᴰ_i − sg[e_b]‖²`, where `a = b = v*(F³ᴰ_i)`
/// in the anchored mode.
pub fn commitment_loss_with(f2d: &DiffValue, f3d: &DiffValue, entries: &DiffValue, mode: CommitmentMode) -> Result<DiffValue, AutodiffError> {
    if f2d.shape() != f3d.shape() {
        return Err(AutodiffError::Shape { op: "commitment_loss", lhs: f2d.shape(), rhs: f3d.shape() });
    }
    let m = f3d.shape().0;
    if m == 0 {
        log::warn!("commitment loss over zero pairs is defined as 0");
        return Ok(DiffValue::scalar(0.0));
    }
    let book = entries.detach();
    let idx_3d = nearest_rows(&book.data(), &f3d.data());
    let idx_2d = match mode {
        CommitmentMode::Anchored3d => idx_3d.clone(),
        CommitmentMode::PerModality => nearest_rows(&book.data(), &f2d.data()),
    };
    let d2 = f2d.sub(&book.select_rows(&idx_2d)?)?.square().sum();
    let d3 = f3d.sub(&book.select_rows(&idx_3d)?)?.square().sum();
    Ok(d2.add(&d3)?.scale(1.0 / m as f64))
}

pub fn commitment_loss(f2d: &DiffValue, f3d: &DiffValue, book: &Codebook, mode: CommitmentMode) -> Result<DiffValue, AutodiffError> {
    commitment_loss_with(f2d, f3d, &DiffValue::constant(book.entries.clone()), mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub usage_2d: Vec<u64>,
    pub usage_3d: Vec<u64>,
    pub joint_fraction: f64,
    pub perplexity: f64,
}

pub fn usage_stats(book: &Codebook) -> UsageStats {
    let used = book.usage_2d.iter().zip(&book.usage_3d).filter(|(a, b)| **a + **b > 0).count();
    let joint = book.usage_2d.iter().zip(&book.usage_3d).filter(|(a, b)| **a > 0 && **b > 0).count();
    let total: u64 = book.usage_2d.iter().chain(&book.usage_3d).sum();
    let entropy: f64 = book
        .usage_2d
        .iter()
        .zip(&book.usage_3d)
        .map(|(a, b)| (a + b) as f64 / total.max(1) as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    UsageStats {
        usage_2d: book.usage_2d.clone(),
        usage_3d: book.usage_3d.clone(),
        joint_fraction: if used == 0 { 0.0 } else { joint as f64 / used as f64 },
        perplexity: if total == 0 { 0.0 } else { entropy.exp() },
    }
}

/// One CSV row per codeword.
pub fn write_usage_csv<W: Write>(stats: &UsageStats, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["codeword", "usage_2d", "usage_3d"])?;
    for (k, (a, b)) in stats.usage_2d.iter().zip(&stats.usage_3d).enumerate() {
        w.write_record([k.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Resets every codeword idle for at least `threshold_steps` updates to a
/// random donor row plus noise of scale 1e-3.
pub fn revive_dead_codes(book: &mut Codebook, donors: &Matrix, threshold_steps: u64, seed: u64) -> Result<usize, AutodiffError> {
    if donors.rows() == 0 || donors.cols() != book.dim() {
        return Err(AutodiffError::Shape { op: "revive_dead_codes", lhs: donors.shape(), rhs: book.entries.shape() });
    }
    let mut rng = rng_for(seed, "revive", 0);
    let mut revived = 0;
    for k in 0..book.size() {
        if book.steps_since_use[k] < threshold_steps {
            continue;
        }
        let j = rng.random_range(0..donors.rows());
        for (e, &d) in book.entries.row_mut(k).iter_mut().zip(donors.row(j)) {
            *e = d + 1e-3 * rng.random_range(-1.0..1.0);
        }
        book.steps_since_use[k] = 0;
        revived += 1;
    }
    Ok(revived)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book2() -> Codebook {
        Codebook::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), 0.9).unwrap()
    }

    #[test]
    fn nearest_codeword_by_hand() {
        let mut b = book2();
        let f = DiffValue::param(Matrix::from_rows(&[[0.6, 0.8]]));
        let (q, idx) = quantize(&f, &mut b, Some(Modality::Image)).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q.value(), Matrix::from_rows(&[[0.0, 1.0]]));
        assert_eq!(b.usage_2d, vec![0, 1]);
        q.square().sum().backward().unwrap();
        assert_eq!(f.grad(), Matrix::from_rows(&[[0.0, 2.0]]));
    }

    #[test]
    fn exact_codeword_is_fixed_point() {
        let entries = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.7], [0.5, 0.5], [1.0 / 3.0, 0.9]]);
        let mut b = Codebook::new(entries.clone(), 0.5).unwrap();
        let (q, idx) = quantize(&DiffValue::constant(entries.select_rows(&[3])), &mut b, None).unwrap();
        assert_eq!(idx, vec![3]);
        assert_eq!(q.value().as_slice(), entries.row(3));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let b = Codebook::new(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]), 0.5).unwrap();
        assert_eq!(b.nearest(&Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.0]])), vec![0, 0]);
    }

    #[test]
    fn ema_by_hand() {
        let mut b = Codebook::new(Matrix::from_rows(&[[0.0, 0.0], [5.0, 5.0]]), 0.9).unwrap();
        let f2 = Matrix::from_rows(&[[2.0, 0.0]]);
        let f3 = Matrix::from_rows(&[[0.0, 2.0]]);
        ema_update(&mut b, (&f2, &[0]), (&f3, &[0])).unwrap();
        assert!((b.entries.get(0, 0) - 0.1).abs() < 1e-15 && (b.entries.get(0, 1) - 0.1).abs() < 1e-15);
        assert_eq!(b.entries.row(1), &[5.0, 5.0]);
        assert_eq!(b.steps_since_use, vec![0, 1]);
    }

    #[test]
    fn commitment_by_hand() {
        let b = book2();
        let f2 = DiffValue::param(Matrix::from_rows(&[[1.0, 0.0]]));
        let f3 = DiffValue::param(Matrix::from_rows(&[[0.0, 0.5]]));
        let l = commitment_loss(&f2, &f3, &b, CommitmentMode::Anchored3d).unwrap();
        assert!((l.item() - 2.25).abs() < 1e-15);
        // Per-modality: the 2D feature sits on its own codeword.
        let l = commitment_loss(&f2, &f3, &b, CommitmentMode::PerModality).unwrap();
        assert!((l.item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn commitment_zero_at_anchor_and_stops_codebook_gradient() {
        let entries = DiffValue::param(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let f = DiffValue::param(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let l = commitment_loss_with(&f, &f, &entries, CommitmentMode::Anchored3d).unwrap();
        assert_eq!(l.item(), 0.0);
        let f2 = DiffValue::param(Matrix::from_rows(&[[0.3, 0.2], [0.9, -0.1]]));
        let l = commitment_loss_with(&f2, &f, &entries, CommitmentMode::Anchored3d).unwrap();
        l.backward().unwrap();
        assert_eq!(entries.grad(), Matrix::zeros(2, 2));
        assert!(f2.grad().max_abs() > 0.0);
    }

    #[test]
    fn empty_commitment_is_zero() {
        let z = DiffValue::constant(Matrix::zeros(0, 2));
        assert_eq!(commitment_loss(&z, &z, &book2(), CommitmentMode::Anchored3d).unwrap().item(), 0.0);
    }

    #[test]
    fn usage_statistics() {
        let mut b = Codebook::new(Matrix::zeros(4, 2), 0.5).unwrap();
        assert_eq!(usage_stats(&b).joint_fraction, 0.0);
        b.usage_2d = vec![1, 1, 1, 1];
        b.usage_3d = vec![1, 1, 1, 1];
        let s = usage_stats(&b);
        assert_eq!(s.joint_fraction, 1.0);
        assert!((s.perplexity - 4.0).abs() < 1e-12);
        b.usage_2d = vec![3, 2, 0, 0];
        b.usage_3d = vec![0, 0, 1, 0];
        assert_eq!(usage_stats(&b).joint_fraction, 0.0);
        let mut out = Vec::new();
        write_usage_csv(&usage_stats(&b), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().nth(1), Some("0,3,0"));
    }

    #[test]
    fn revival() {
        let donors = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let mut b = Codebook::new(Matrix::zeros(3, 2), 0.5).unwrap();
        assert_eq!(revive_dead_codes(&mut b, &donors, 1, 0).unwrap(), 0);
        b.steps_since_use = vec![5, 5, 5];
        assert_eq!(revive_dead_codes(&mut b, &donors, 5, 0).unwrap(), 3);
        for e in b.entries.iter_rows() {
            assert!(donors.iter_rows().any(|d| squared_distance(d, e).sqrt() < 1e-2));
        }
        assert_eq!(b.steps_since_use, vec![0, 0, 0]);
    }

    #[test]
    fn invalid_gamma() {
        assert!(Codebook::new(Matrix::zeros(1, 1), 1.0).is_err());
    }
}
