//! Linear probe on frozen point latents.

use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffValue, Matrix};
use crate::encoders::encode_points_with;
use crate::nn::glorot_uniform;
use crate::synthdata::SceneSample;

use super::model::{Model, SceneCache};
use super::optim::Adam;
use super::{TrainConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Full-batch Adam iterations.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

/// Standardisation followed by an affine softmax classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearClassifier {
    fn standardize(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let logits = self.standardize(x).matmul(&self.weight);
        logits
            .iter_rows()
            .map(|row| {
                let b = self.bias.row(0);
                (0..row.len()).fold(0, |best, k| if row[k] + b[k] > row[best] + b[best] { k } else { best })
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Multinomial logistic regression by full-batch Adam on standardised features.
pub fn fit_linear_probe(x: &Matrix, y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<LinearClassifier, TrainError> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(TrainError::Config(format!("{} feature rows for {} labels", x.rows(), y.len())));
    }
    let first = y[0];
    if y.iter().all(|&l| l == first) {
        return Err(TrainError::Config(format!("training labels contain only class {first}")));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|c| {
            let v = (0..n).map(|r| (x.get(r, c) - mean[c]).powi(2)).sum::<f64>() / n as f64;
            if v > 1e-24 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let mut clf = LinearClassifier { mean, std, weight: Matrix::zeros(d, n_classes), bias: Matrix::zeros(1, n_classes) };
    let xs = DiffValue::constant(clf.standardize(x));
    let onehot = DiffValue::constant(Matrix::from_fn(n, n_classes, |r, k| if y[r] == k { 1.0 } else { 0.0 }));
    let ones = DiffValue::constant(Matrix::filled(n, 1, 1.0));
    let w = DiffValue::param(glorot_uniform(d, n_classes, cfg.seed, "probe").scale(0.1));
    let b = DiffValue::param(Matrix::zeros(1, n_classes));
    let params = vec![("probe.weight".to_string(), w.clone()), ("probe.bias".to_string(), b.clone())];
    let mut adam = Adam::default();
    for _ in 0..cfg.steps {
        w.zero_grad();
        b.zero_grad();
        let logits = xs.matmul(&w)?.add(&ones.matmul(&b)?)?;
        let loss = logits.log_softmax_rows().mul(&onehot)?.sum().scale(-1.0 / n as f64);
        loss.backward()?;
        adam.step(&params, cfg.lr)?;
    }
    clf.weight = w.value();
    clf.bias = b.value();
    Ok(clf)
}

/// Frozen per-point latents (pre-head) and labels of every scene, stacked.
pub fn point_latents(model: &Model, cfg: &TrainConfig, scenes: &[SceneSample]) -> Result<(Matrix, Vec<usize>), TrainError> {
    let d = cfg.encoder.latent_dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in scenes {
        let cache = SceneCache::new(s, cfg)?;
        data.extend_from_slice(encode_points_with(&cache.points, &model.encoder)?.data().as_slice());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Matrix::from_vec(labels.len(), d, data)?, labels))
}

pub fn probe_features(
    train: (&Matrix, &[usize]),
    test: (&Matrix, &[usize]),
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    let clf = fit_linear_probe(train.0, train.1, n_classes, cfg)?;
    Ok(ProbeReport {
        accuracy: accuracy(&clf.predict(test.0), test.1),
        train_accuracy: accuracy(&clf.predict(train.0), train.1),
        n_train: train.1.len(),
        n_test: test.1.len(),
        n_classes,
    })
}

/// Held-out per-point accuracy of a linear classifier on frozen latents.
pub fn linear_probe(
    model: &Model,
    cfg: &TrainConfig,
    labeled: &[SceneSample],
    heldout: &[SceneSample],
    n_classes: usize,
    probe: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    let (xtr, ytr) = point_latents(model, cfg, labeled)?;
    let (xte, yte) = point_latents(model, cfg, heldout)?;
    probe_features((&xtr, &ytr), (&xte, &yte), n_classes, probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_features_are_learned_exactly() {
        let x = Matrix::from_fn(40, 2, |r, c| if c == 0 { (r % 4) as f64 * 3.0 + 0.1 * (r as f64).sin() } else { (r as f64 * 0.7).cos() });
        let y: Vec<usize> = (0..40).map(|r| r % 4).collect();
        let r = probe_features((&x, &y), (&x, &y), 4, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn random_labels_are_at_chance() {
        let mut rng = crate::seed::rng_for(1, "t", 0);
        let x = Matrix::from_fn(4000, 8, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..4000).map(|_| rng.random_range(0..4)).collect();
        let r = probe_features((&x.select_rows(&(0..2000).collect::<Vec<_>>()), &y[..2000]), (&x.select_rows(&(2000..4000).collect::<Vec<_>>()), &y[2000..]), 4, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.25).abs() < 0.05, "{}", r.accuracy);
        assert!((0.0..=1.0).contains(&r.train_accuracy));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(fit_linear_probe(&x, &[1, 1, 1], 4, &ProbeConfig::default()), Err(TrainError::Config(_))));
    }
}
