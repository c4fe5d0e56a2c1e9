//! Adam and the one-cycle learning-rate schedule.

use std::collections::BTreeMap;

use crate::autodiff::{DiffValue, Matrix};

use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    /// One bias-corrected step on every parameter from its accumulated gradient.
    ///
    /// All gradients are checked before anything moves, so a NaN leaves both
    /// the parameters and the state untouched.
    pub fn step(&mut self, params: &[(String, DiffValue)], lr: f64) -> Result<(), TrainError> {
        let grads: Vec<Matrix> = params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((name, p), g) in params.iter().zip(grads) {
            let (r, c) = g.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(r, c));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(r, c));
            let mut value = p.data_mut();
            let it = value.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice());
            for (((x, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &[(String, DiffValue)], state: &mut Adam, lr: f64) -> Result<(), TrainError> {
    state.step(params, lr)
}

pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIV: f64 = 25.0;
pub const END_DIV: f64 = 1e4;

/// Linear warmup from `lr_max/25` over the first 30% of steps, then cosine
/// decay to `lr_max/1e4` at `total_steps`.
pub fn one_cycle_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let step = if step > total_steps {
        log::warn!("schedule step {step} past the end {total_steps}; clamped");
        total_steps
    } else {
        step
    };
    let (s, total) = (step as f64, total_steps as f64);
    let warm = WARMUP_FRACTION * total;
    let start = lr_max / START_DIV;
    let end = lr_max / END_DIV;
    if s < warm {
        start + (lr_max - start) * s / warm
    } else if s == warm {
        lr_max
    } else {
        let progress = (s - warm) / (total - warm);
        end + (lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
