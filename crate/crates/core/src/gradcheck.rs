//! Central finite-difference checks of tape gradients.
//!
//! The finite-difference side only ever evaluates the forward pass on
//! constant inputs, so it does not share any code path with `backward`.

use crate::autodiff::{AutodiffError, DiffValue, Matrix};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor in the relative error, so exactly-zero gradients compare
/// on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `‖tape − fd‖∞ / max(‖tape‖∞, ‖fd‖∞, 1e-3)` over all inputs.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Gradients of a scalar function by central differences, one input entry at a time.
pub fn finite_differences<F>(inputs: &[Matrix], f: &F, step: f64) -> Result<Vec<Matrix>, AutodiffError>
where
    F: Fn(&[DiffValue]) -> Result<DiffValue, AutodiffError>,
{
    let eval = |vals: &[Matrix]| -> Result<f64, AutodiffError> {
        let leaves: Vec<DiffValue> = vals.iter().cloned().map(DiffValue::constant).collect();
        let out = f(&leaves)?;
        let (r, c) = out.shape();
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(r, c));
        }
        Ok(out.item())
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let (rows, cols) = inputs[i].shape();
        let mut g = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let x0 = inputs[i].as_slice()[k];
            work[i].as_mut_slice()[k] = x0 + step;
            let up = eval(&work)?;
            work[i].as_mut_slice()[k] = x0 - step;
            let down = eval(&work)?;
            work[i].as_mut_slice()[k] = x0;
            g.as_mut_slice()[k] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Gradients of a scalar function from one backward pass.
pub fn tape_gradients<F>(inputs: &[Matrix], f: &F) -> Result<Vec<Matrix>, AutodiffError>
where
    F: Fn(&[DiffValue]) -> Result<DiffValue, AutodiffError>,
{
    let leaves: Vec<DiffValue> = inputs.iter().cloned().map(DiffValue::param).collect();
    let out = f(&leaves)?;
    out.backward()?;
    Ok(leaves.iter().map(DiffValue::grad).collect())
}

pub fn compare(tape: &[Matrix], fd: &[Matrix]) -> GradCheck {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in tape.iter().zip(fd) {
        let diff = a.zip_map(n, |x, y| (x - y).abs()).max_abs();
        let scale = a.max_abs().max(n.max_abs()).max(REL_FLOOR);
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / scale);
    }
    GradCheck { max_rel_error: max_rel, max_abs_error: max_abs }
}

/// Compares tape gradients of `f` against central differences at `inputs`.
pub fn check<F>(inputs: &[Matrix], f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&[DiffValue]) -> Result<DiffValue, AutodiffError>,
{
    let tape = tape_gradients(inputs, &f)?;
    let fd = finite_differences(inputs, &f, FD_STEP)?;
    Ok(compare(&tape, &fd))
}
