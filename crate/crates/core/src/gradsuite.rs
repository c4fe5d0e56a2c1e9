//! The full gradient check: every differentiable operation and loss, each at
//! several random inputs, compared against central differences.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, DiffValue, Matrix, RowMix};
use crate::codebook::{commitment_loss_with, CommitmentMode};
use crate::encoders::{upsample_bilinear, ImageGrid};
use crate::gradcheck;
use crate::nn::Linear;
use crate::objectives::{info_nce, orthogonal_loss, total_loss, LossTerms, LossWeights};
use crate::pretext::{mim_loss, occupancy_features, occupancy_loss, ImageDecoderParams, MaskPlan, OccupancyDecoderParams};
use crate::seed::rng_for;

/// Threshold on the worst relative error for an operation to pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

type Scalar = Box<dyn Fn(&[DiffValue]) -> Result<DiffValue, AutodiffError>>;

struct Case {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    /// Maps a standard normal draw into the operation's comfortable domain.
    shift: fn(f64) -> f64,
    f: Scalar,
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Fixed weights so that a reduction does not just sum the output.
fn probe(rows: usize, cols: usize) -> DiffValue {
    DiffValue::constant(Matrix::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) as f64 * 0.61).sin() + 0.3))
}

fn weighted(v: Result<DiffValue, AutodiffError>) -> Result<DiffValue, AutodiffError> {
    let v = v?;
    let (r, c) = v.shape();
    Ok(v.mul(&probe(r, c))?.sum())
}

fn id(x: f64) -> f64 {
    x
}

// Keeps relu and the clamped log away from their kinks.
fn away_from_zero(x: f64) -> f64 {
    x + 0.2 * x.signum()
}

fn positive(x: f64) -> f64 {
    0.3 + x.abs()
}

fn cases() -> Result<Vec<Case>, AutodiffError> {
    let grid = ImageGrid::new([4, 4], 2)?;
    let mix = Rc::new(RowMix::new(3, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(0, -0.25), (1, 0.75), (2, 2.0)], vec![]])?);
    let plan = MaskPlan { masked_patch_ids: vec![0, 3], mask_ratio: 0.5, seed: 0 };
    let image = Matrix::from_fn(16, 3, |r, c| ((r + 2 * c) as f64 * 0.37).sin().abs());
    let points = Matrix::from_fn(6, 3, |r, c| ((r * 3 + c) as f64 * 1.3).cos());
    let queries = [[0.1, 0.2, 0.3], [0.5, -0.5, 0.2], [-0.3, 0.1, 0.9], [0.0, 0.4, -0.6]];
    let book = DiffValue::constant(Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 2.1).sin()));

    let unary = |name: &'static str, shift: fn(f64) -> f64, op: fn(&DiffValue) -> DiffValue| Case {
        name,
        shapes: vec![(3, 4)],
        shift,
        f: Box::new(move |x| weighted(Ok(op(&x[0])))),
    };
    let out = vec![
        Case { name: "matmul", shapes: vec![(3, 4), (4, 2)], shift: id, f: Box::new(|x| weighted(x[0].matmul(&x[1]))) },
        Case { name: "add", shapes: vec![(3, 4), (3, 4)], shift: id, f: Box::new(|x| weighted(x[0].add(&x[1]))) },
        Case { name: "sub", shapes: vec![(3, 4), (3, 4)], shift: id, f: Box::new(|x| weighted(x[0].sub(&x[1]))) },
        Case { name: "mul", shapes: vec![(3, 4), (3, 4)], shift: id, f: Box::new(|x| weighted(x[0].mul(&x[1]))) },
        unary("scale", id, |x| x.scale(-1.7)),
        unary("exp", id, DiffValue::exp),
        unary("log", positive, DiffValue::log),
        unary("relu", away_from_zero, DiffValue::relu),
        unary("sigmoid", id, DiffValue::sigmoid),
        unary("square", id, DiffValue::square),
        unary("transpose", id, DiffValue::transpose),
        unary("softmax_rows", id, DiffValue::softmax_rows),
        unary("log_softmax_rows", id, DiffValue::log_softmax_rows),
        Case { name: "l2_normalize_rows", shapes: vec![(3, 4)], shift: id, f: Box::new(|x| weighted(x[0].l2_normalize_rows())) },
        Case {
            name: "add_row_broadcast",
            shapes: vec![(3, 4), (1, 4)],
            shift: id,
            f: Box::new(|x| weighted(x[0].add_row_broadcast(&x[1]))),
        },
        Case {
            name: "row_mix",
            shapes: vec![(3, 2)],
            shift: id,
            f: Box::new(move |x| weighted(x[0].row_mix(mix.clone()))),
        },
        Case { name: "select_rows", shapes: vec![(3, 2)], shift: id, f: Box::new(|x| weighted(x[0].select_rows(&[2, 0, 2]))) },
        Case {
            name: "concat",
            shapes: vec![(2, 3), (2, 1), (1, 4)],
            shift: id,
            f: Box::new(|x| {
                let wide = DiffValue::concat_cols(&[x[0].clone(), x[1].clone()])?;
                weighted(DiffValue::concat_rows(&[wide, x[2].clone()]))
            }),
        },
        Case { name: "mean", shapes: vec![(3, 4)], shift: id, f: Box::new(|x| Ok(x[0].square().mean())) },
        Case {
            name: "upsample_bilinear",
            shapes: vec![(4, 3)],
            shift: id,
            f: Box::new(move |x| weighted(upsample_bilinear(&x[0], &grid, grid.patch))),
        },
        Case {
            name: "info_nce",
            shapes: vec![(4, 3), (4, 3)],
            shift: id,
            f: Box::new(|x| info_nce(&x[0].l2_normalize_rows()?, &x[1].l2_normalize_rows()?, 0.07)),
        },
        Case {
            name: "commitment_anchored",
            shapes: vec![(4, 3), (4, 3)],
            shift: id,
            f: Box::new({
                let book = book.clone();
                move |x| commitment_loss_with(&x[0], &x[1], &book, CommitmentMode::Anchored3d)
            }),
        },
        Case {
            name: "commitment_per_modality",
            shapes: vec![(4, 3), (4, 3)],
            shift: id,
            f: Box::new(move |x| commitment_loss_with(&x[0], &x[1], &book, CommitmentMode::PerModality)),
        },
        Case {
            name: "mim",
            shapes: vec![(16, 3), (16, 3), (6, 12), (1, 12)],
            shift: id,
            f: Box::new(move |x| {
                let dec = ImageDecoderParams { linear: Linear { weight: x[2].clone(), bias: Some(x[3].clone()) } };
                mim_loss(&x[0], &x[1], &dec, &image, &plan, &grid)
            }),
        },
        Case {
            name: "occupancy_bce",
            shapes: vec![(6, 3), (6, 5), (1, 5), (5, 1)],
            shift: id,
            f: Box::new(move |x| {
                let dec = OccupancyDecoderParams {
                    hidden: Linear { weight: x[1].clone(), bias: Some(x[2].clone()) },
                    out: Linear { weight: x[3].clone(), bias: None },
                };
                let (pooled, offsets) = occupancy_features(&queries, &points, &x[0], 2)?;
                occupancy_loss(&dec.predict(&pooled, &offsets)?, &[1, 0, 1, 0])
            }),
        },
        Case {
            name: "orthogonal",
            shapes: vec![(5, 3), (5, 2), (6, 3), (6, 2)],
            shift: id,
            f: Box::new(|x| orthogonal_loss(&x[0].l2_normalize_rows()?, &x[1], &x[2].l2_normalize_rows()?, &x[3])),
        },
        Case {
            name: "total",
            shapes: vec![(4, 3), (4, 3), (3, 2), (3, 2)],
            shift: id,
            f: Box::new(|x| {
                let f2 = x[0].l2_normalize_rows()?;
                let f3 = x[1].l2_normalize_rows()?;
                let terms = LossTerms {
                    nce: info_nce(&f3, &f2, 0.5)?,
                    commit: x[0].sub(&x[1])?.square().mean(),
                    rec: x[2].square().mean(),
                    occ: occupancy_loss(&x[3].select_rows(&[0, 1])?.matmul(&probe(2, 1))?.sigmoid(), &[1, 0])?,
                    orth: orthogonal_loss(&f2.select_rows(&[0, 1, 2])?, &x[2], &f3.select_rows(&[1, 2, 3])?, &x[3])?,
                    kl: x[3].exp().mean(),
                };
                let weights = LossWeights { nce: 1.0, commit: 0.5, rec: 2.0, occ: 1.0, orth: 0.3, kl: 0.1 };
                Ok(total_loss(terms, weights)?.total)
            }),
        },
    ];
    Ok(out)
}

/// Names of the operations covered by [`run`].
pub fn op_names() -> Vec<&'static str> {
    cases().map(|c| c.iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Checks every operation at `trials` seeded random inputs and reports the
/// worst errors per operation.
pub fn run(root_seed: u64, trials: usize) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut report = Vec::new();
    for case in cases()? {
        let mut worst = gradcheck::GradCheck { max_rel_error: 0.0, max_abs_error: 0.0 };
        for t in 0..trials {
            let mut rng = rng_for(root_seed, &format!("gradsuite:{}", case.name), t as u64);
            let inputs: Vec<Matrix> = case.shapes.iter().map(|&(r, c)| normal(&mut rng, r, c).map(case.shift)).collect();
            let r = gradcheck::check(&inputs, &case.f)?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.max_abs_error = worst.max_abs_error.max(r.max_abs_error);
        }
        report.push(OpCheck {
            op: case.name.into(),
            trials,
            max_rel_error: worst.max_rel_error,
            max_abs_error: worst.max_abs_error,
            passed: worst.max_rel_error < GRADCHECK_TOLERANCE,
        });
    }
    Ok(report)
}
