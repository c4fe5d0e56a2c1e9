use std::rc::Rc;

use super::{AutodiffError, DiffValue, Matrix, LOG_CLAMP, MIN_ROW_NORM};

/// A constant sparse linear map over rows: `out_i = Σ_j w_ij · in_j`.
///
/// Gathering, neighbourhood means, bilinear resampling and patch pooling are
/// all expressed through this one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    input_rows: usize,
    /// Output row `i` owns `entries[offsets[i]..offsets[i + 1]]`.
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl RowMix {
    pub fn new(input_rows: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self, AutodiffError> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut entries = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for row in rows {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| *j >= input_rows) {
                return Err(AutodiffError::Contract(format!(
                    "row mix references input row {j} of {input_rows}"
                )));
            }
            entries.extend(row);
            offsets.push(entries.len());
        }
        Ok(Self { input_rows, offsets, entries })
    }

    /// Plain row gather.
    pub fn gather(input_rows: usize, indices: &[usize]) -> Result<Self, AutodiffError> {
        if let Some(&j) = indices.iter().find(|&&j| j >= input_rows) {
            return Err(AutodiffError::Contract(format!("row mix references input row {j} of {input_rows}")));
        }
        Ok(Self { input_rows, offsets: (0..=indices.len()).collect(), entries: indices.iter().map(|&i| (i, 1.0)).collect() })
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn output_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Weights of output row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let c = x.cols();
        let mut out = Matrix::zeros(self.output_rows(), c);
        for i in 0..self.output_rows() {
            let o = out.row_mut(i);
            for &(j, w) in self.row(i) {
                for (ov, &xv) in o.iter_mut().zip(x.row(j)) {
                    *ov += w * xv;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Matrix) -> Matrix {
        let c = g.cols();
        let mut out = Matrix::zeros(self.input_rows, c);
        for i in 0..self.output_rows() {
            let gi = g.row(i);
            for &(j, w) in self.row(i) {
                for (ov, &gv) in out.row_mut(j).iter_mut().zip(gi) {
                    *ov += w * gv;
                }
            }
        }
        out
    }
}

pub(super) enum Op {
    Leaf,
    MatMul(DiffValue, DiffValue),
    Add(DiffValue, DiffValue),
    Sub(DiffValue, DiffValue),
    Mul(DiffValue, DiffValue),
    Scale(DiffValue, f64),
    Exp(DiffValue),
    Log(DiffValue),
    Relu(DiffValue),
    Sigmoid(DiffValue),
    Square(DiffValue),
    SoftmaxRows(DiffValue),
    LogSoftmaxRows(DiffValue),
    L2NormalizeRows(DiffValue),
    Transpose(DiffValue),
    AddRowBroadcast(DiffValue, DiffValue),
    RowMix(DiffValue, Rc<RowMix>),
    ConcatCols(Vec<DiffValue>),
    ConcatRows(Vec<DiffValue>),
    Sum(DiffValue),
    Mean(DiffValue),
    StraightThrough(DiffValue),
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::Transpose(_) => "transpose",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::RowMix(..) => "row_mix",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::StraightThrough(_) => "straight_through",
        }
    }

    pub(super) fn parents(&self) -> Vec<&DiffValue> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBroadcast(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Transpose(a)
            | Op::RowMix(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StraightThrough(a) => vec![a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.iter().collect(),
        }
    }

    /// Local vector-Jacobian products: gradient `g` of the output (whose value
    /// is `out`) mapped to each parent.
    pub(super) fn backward(&self, out: &Matrix, g: &Matrix) -> Vec<(DiffValue, Matrix)> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if a.requires_grad() {
                    v.push((a.clone(), g.matmul_nt(&b.data())));
                }
                if b.requires_grad() {
                    v.push((b.clone(), a.data().matmul_tn(g)));
                }
                v
            }
            Op::Add(a, b) => vec![
                (a.clone(), unbroadcast(g.clone(), a.shape())),
                (b.clone(), unbroadcast(g.clone(), b.shape())),
            ],
            Op::Sub(a, b) => vec![
                (a.clone(), unbroadcast(g.clone(), a.shape())),
                (b.clone(), unbroadcast(g.scale(-1.0), b.shape())),
            ],
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let ga = if a.requires_grad() { Some(broadcast_mul(g, &bd)) } else { None };
                let gb = if b.requires_grad() { Some(broadcast_mul(g, &ad)) } else { None };
                let mut v = Vec::with_capacity(2);
                if let Some(ga) = ga {
                    v.push((a.clone(), unbroadcast(ga, ad.shape())));
                }
                if let Some(gb) = gb {
                    v.push((b.clone(), unbroadcast(gb, bd.shape())));
                }
                v
            }
            Op::Scale(a, s) => vec![(a.clone(), g.scale(*s))],
            Op::Exp(a) => vec![(a.clone(), g.zip_map(out, |gi, yi| gi * yi))],
            Op::Log(a) => {
                let x = a.data();
                let dx = g.zip_map(&x, |gi, xi| if xi > LOG_CLAMP { gi / xi } else { 0.0 });
                vec![(a.clone(), dx)]
            }
            Op::Relu(a) => {
                let x = a.data();
                vec![(a.clone(), g.zip_map(&x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            }
            Op::Sigmoid(a) => vec![(a.clone(), g.zip_map(out, |gi, yi| gi * yi * (1.0 - yi)))],
            Op::Square(a) => {
                let x = a.data();
                vec![(a.clone(), g.zip_map(&x, |gi, xi| 2.0 * gi * xi))]
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - s);
                    }
                }
                vec![(a.clone(), dx)]
            }
            Op::LogSoftmaxRows(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = gi - yi.exp() * s;
                    }
                }
                vec![(a.clone(), dx)]
            }
            Op::L2NormalizeRows(a) => {
                let x = a.data();
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (y, gr) = (out.row(r), g.row(r));
                    let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gi - yi * s) / norm;
                    }
                }
                vec![(a.clone(), dx)]
            }
            Op::Transpose(a) => vec![(a.clone(), g.transpose())],
            Op::AddRowBroadcast(a, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for row in g.iter_rows() {
                    for (b, &v) in gb.as_mut_slice().iter_mut().zip(row) {
                        *b += v;
                    }
                }
                vec![(a.clone(), g.clone()), (bias.clone(), gb)]
            }
            Op::RowMix(a, mix) => vec![(a.clone(), mix.apply_transpose(g))],
            Op::ConcatCols(parts) => {
                let mut v = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let c = p.shape().1;
                    if p.requires_grad() {
                        let gp = Matrix::from_fn(g.rows(), c, |r, j| g.get(r, offset + j));
                        v.push((p.clone(), gp));
                    }
                    offset += c;
                }
                v
            }
            Op::ConcatRows(parts) => {
                let mut v = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let r = p.shape().0;
                    if p.requires_grad() {
                        let gp = Matrix::from_fn(r, g.cols(), |i, j| g.get(offset + i, j));
                        v.push((p.clone(), gp));
                    }
                    offset += r;
                }
                v
            }
            Op::Sum(a) => {
                let (r, c) = a.shape();
                vec![(a.clone(), Matrix::filled(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = a.shape();
                vec![(a.clone(), Matrix::filled(r, c, g.item() / (r * c) as f64))]
            }
            Op::StraightThrough(a) => vec![(a.clone(), g.clone())],
        }
    }
}

fn broadcast_mul(g: &Matrix, other: &Matrix) -> Matrix {
    if other.is_scalar() {
        g.scale(other.item())
    } else {
        g.zip_map(other, |a, b| a * b)
    }
}

/// Sums a gradient down to a 1×1 operand when broadcasting was used.
fn unbroadcast(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        g
    } else {
        debug_assert_eq!(shape, (1, 1));
        Matrix::scalar(g.sum())
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize), AutodiffError> {
    if a == b || b == (1, 1) {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else {
        Err(AutodiffError::Shape { op, lhs: a, rhs: b })
    }
}

fn binary_elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.is_scalar() {
        let s = b.item();
        a.map(|x| f(x, s))
    } else {
        let s = a.item();
        b.map(|y| f(s, y))
    }
}

impl DiffValue {
    pub fn matmul(&self, other: &DiffValue) -> Result<DiffValue, AutodiffError> {
        let (a, b) = (self.data(), other.data());
        if a.cols() != b.rows() {
            return Err(AutodiffError::Shape { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let out = a.matmul(&b);
        drop((a, b));
        Ok(Self::from_op(out, Op::MatMul(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &DiffValue) -> Result<DiffValue, AutodiffError> {
        broadcast_shape("add", self.shape(), other.shape())?;
        let out = binary_elementwise(&self.data(), &other.data(), |x, y| x + y);
        Ok(Self::from_op(out, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &DiffValue) -> Result<DiffValue, AutodiffError> {
        broadcast_shape("sub", self.shape(), other.shape())?;
        let out = binary_elementwise(&self.data(), &other.data(), |x, y| x - y);
        Ok(Self::from_op(out, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &DiffValue) -> Result<DiffValue, AutodiffError> {
        broadcast_shape("mul", self.shape(), other.shape())?;
        let out = binary_elementwise(&self.data(), &other.data(), |x, y| x * y);
        Ok(Self::from_op(out, Op::Mul(self.clone(), other.clone())))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, s: f64) -> DiffValue {
        let out = self.data().scale(s);
        Self::from_op(out, Op::Scale(self.clone(), s))
    }

    pub fn exp(&self) -> DiffValue {
        let out = self.data().map(f64::exp);
        Self::from_op(out, Op::Exp(self.clone()))
    }

    /// Natural log with the input clamped to at least [`LOG_CLAMP`].
    pub fn log(&self) -> DiffValue {
        let out = self.data().map(|x| x.max(LOG_CLAMP).ln());
        Self::from_op(out, Op::Log(self.clone()))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&self) -> DiffValue {
        let out = self.data().map(|x| if x > 0.0 { x } else { 0.0 });
        Self::from_op(out, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> DiffValue {
        let out = self.data().map(sigmoid);
        Self::from_op(out, Op::Sigmoid(self.clone()))
    }

    pub fn square(&self) -> DiffValue {
        let out = self.data().map(|x| x * x);
        Self::from_op(out, Op::Square(self.clone()))
    }

    pub fn softmax_rows(&self) -> DiffValue {
        let x = self.data();
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut s = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - m).exp();
                s += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= s;
            }
        }
        drop(x);
        Self::from_op(out, Op::SoftmaxRows(self.clone()))
    }

    /// Row-wise `x − logsumexp(x)`, stabilized by subtracting the row max.
    pub fn log_softmax_rows(&self) -> DiffValue {
        let x = self.data();
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (ov, &v) in out.row_mut(r).iter_mut().zip(row) {
                *ov = v - lse;
            }
        }
        drop(x);
        Self::from_op(out, Op::LogSoftmaxRows(self.clone()))
    }

    pub fn l2_normalize_rows(&self) -> Result<DiffValue, AutodiffError> {
        let x = self.data();
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > MIN_ROW_NORM) {
                return Err(AutodiffError::Degenerate { op: "l2_normalize_rows", row: r, norm });
            }
            for (ov, &v) in out.row_mut(r).iter_mut().zip(row) {
                *ov = v / norm;
            }
        }
        drop(x);
        Ok(Self::from_op(out, Op::L2NormalizeRows(self.clone())))
    }

    pub fn transpose(&self) -> DiffValue {
        let out = self.data().transpose();
        Self::from_op(out, Op::Transpose(self.clone()))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row_broadcast(&self, bias: &DiffValue) -> Result<DiffValue, AutodiffError> {
        let (x, b) = (self.data(), bias.data());
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(AutodiffError::Shape { op: "add_row_broadcast", lhs: x.shape(), rhs: b.shape() });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        drop((x, b));
        Ok(Self::from_op(out, Op::AddRowBroadcast(self.clone(), bias.clone())))
    }

    pub fn row_mix(&self, mix: Rc<RowMix>) -> Result<DiffValue, AutodiffError> {
        let x = self.data();
        if x.rows() != mix.input_rows() {
            return Err(AutodiffError::Shape {
                op: "row_mix",
                lhs: x.shape(),
                rhs: (mix.input_rows(), mix.output_rows()),
            });
        }
        let out = mix.apply(&x);
        drop(x);
        Ok(Self::from_op(out, Op::RowMix(self.clone(), mix)))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<DiffValue, AutodiffError> {
        let mix = RowMix::gather(self.shape().0, indices)?;
        self.row_mix(Rc::new(mix))
    }

    pub fn concat_cols(parts: &[DiffValue]) -> Result<DiffValue, AutodiffError> {
        let rows = parts.first().map_or(0, |p| p.shape().0);
        for p in parts {
            if p.shape().0 != rows {
                return Err(AutodiffError::Shape { op: "concat_cols", lhs: parts[0].shape(), rhs: p.shape() });
            }
        }
        let cols: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let d = p.data();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + d.cols()].copy_from_slice(d.row(r));
            }
            offset += d.cols();
        }
        Ok(Self::from_op(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(parts: &[DiffValue]) -> Result<DiffValue, AutodiffError> {
        let cols = parts.first().map_or(0, |p| p.shape().1);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let d = p.data();
            if d.cols() != cols {
                return Err(AutodiffError::Shape { op: "concat_rows", lhs: parts[0].shape(), rhs: d.shape() });
            }
            data.extend_from_slice(d.as_slice());
            rows += d.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(Self::from_op(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&self) -> DiffValue {
        let s = self.data().sum();
        Self::from_op(Matrix::scalar(s), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> DiffValue {
        let d = self.data();
        let m = d.sum() / d.len().max(1) as f64;
        drop(d);
        Self::from_op(Matrix::scalar(m), Op::Mean(self.clone()))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
