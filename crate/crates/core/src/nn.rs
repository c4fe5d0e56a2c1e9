//! Small building blocks shared by the encoders and decoders.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix};
use crate::seed::rng_for;

/// `x·W (+ b)` with `W` of shape `fan_in × fan_out`.
#[derive(Clone)]
pub struct Linear {
    pub weight: DiffValue,
    pub bias: Option<DiffValue>,
}

/// Uniform on `[−a, a]` with `a = √(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, seed: u64, label: &str) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_for(seed, label, 0);
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..=a))
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, seed: u64, label: &str) -> Self {
        Self {
            weight: DiffValue::param(glorot_uniform(fan_in, fan_out, seed, label)),
            bias: bias.then(|| DiffValue::param(Matrix::zeros(1, fan_out))),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape().0
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape().1
    }

    pub fn forward(&self, x: &DiffValue) -> Result<DiffValue, AutodiffError> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row_broadcast(b),
            None => Ok(y),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, DiffValue)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Anything that owns trainable leaves under stable names.
pub trait Parameters {
    fn named_parameters(&self) -> Vec<(String, DiffValue)>;

    fn parameters(&self) -> Vec<DiffValue> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(self.named_parameters().into_iter().map(|(n, p)| (n, p.value())).collect())
    }

    /// Overwrites every parameter from `snap`; names and shapes must match.
    fn restore(&self, snap: &ParamSnapshot) -> Result<(), AutodiffError> {
        let named = self.named_parameters();
        if named.len() != snap.0.len() {
            return Err(AutodiffError::Contract(format!("checkpoint has {} tensors, model has {}", snap.0.len(), named.len())));
        }
        for (name, p) in named {
            let m = snap.0.get(&name).ok_or_else(|| AutodiffError::Contract(format!("checkpoint lacks {name}")))?;
            if m.shape() != p.shape() {
                return Err(AutodiffError::Shape { op: "restore", lhs: p.shape(), rhs: m.shape() });
            }
            *p.data_mut() = m.clone();
        }
        Ok(())
    }
}

/// Parameter values by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot(pub BTreeMap<String, Matrix>);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_determinism() {
        let w = glorot_uniform(30, 10, 4, "w");
        let a = (6.0f64 / 40.0).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= a));
        assert_eq!(w, glorot_uniform(30, 10, 4, "w"));
        assert_ne!(w, glorot_uniform(30, 10, 4, "v"));
    }

    #[test]
    fn linear_forward() {
        let l = Linear::new(2, 3, true, 1, "l");
        *l.bias.as_ref().unwrap().data_mut() = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let x = DiffValue::constant(Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(l.forward(&x).unwrap().value(), Matrix::from_rows(&[[1.0, 2.0, 3.0]]));
    }
}
