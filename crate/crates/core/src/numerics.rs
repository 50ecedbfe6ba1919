//! Dense row-major matrices, stable softmax, and a finite-difference
//! gradient checker. Everything else in the crate builds on this module.

use std::fmt;
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types the numeric core is generic over.
///
/// `f32` and `f64` both qualify; the concrete aliases at the crate root pin
/// `f64` for the model and trainer layers.
pub trait Scalar:
    Float + NumAssign + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn cast(v: f64) -> Self {
        Self::from(v).expect("constant representable in scalar type")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssign + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

#[derive(Serialize, Deserialize)]
struct RawMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

/// Dense matrix with row-major storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawMatrix<F>",
    into = "RawMatrix<F>",
    bound(serialize = "F: Serialize + Clone", deserialize = "F: Deserialize<'de>")
)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F> TryFrom<RawMatrix<F>> for Matrix<F> {
    type Error = String;

    fn try_from(raw: RawMatrix<F>) -> std::result::Result<Self, String> {
        if raw.data.len() != raw.rows * raw.cols {
            return Err(format!(
                "matrix data length {} does not match {}x{}",
                raw.data.len(),
                raw.rows,
                raw.cols
            ));
        }
        Ok(Matrix {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl<F: Clone> From<Matrix<F>> for RawMatrix<F> {
    fn from(m: Matrix<F>) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("rows have unequal lengths".to_string()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += factor * other`, in place.
    pub fn scaled_add(&mut self, other: &Self, factor: F) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "scaled_add {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<F> Index<(usize, usize)> for Matrix<F> {
    type Output = F;

    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.data[i * self.cols + j]
    }
}

impl<F> IndexMut<(usize, usize)> for Matrix<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.data[i * self.cols + j]
    }
}

/// Standard matrix product `a * b`.
pub fn matmul<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for j in 0..b.cols {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Row-wise softmax with max subtraction, so huge logits cannot overflow.
pub fn softmax_rows<F: Scalar>(logits: &Matrix<F>) -> Matrix<F> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    debug_assert!(out.all_finite());
    out
}

/// Index of the row maximum, first index on ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckResult<F> {
    pub max_relative_error: F,
    pub worst_index: (usize, usize),
}

/// Compares `analytic_grad` against central differences of `f` around `point`.
///
/// The relative error at each coordinate uses `max(|analytic|, |numeric|, 1e-8)`
/// as denominator, so tiny gradients do not blow the ratio up.
pub fn finite_diff_check<F: Scalar>(
    mut f: impl FnMut(&Matrix<F>) -> F,
    analytic_grad: &Matrix<F>,
    point: &Matrix<F>,
    h: F,
) -> Result<GradCheckResult<F>> {
    if h <= F::zero() || h > F::cast(1e-2) {
        return Err(Error::config(format!("step h = {h} outside (0, 1e-2]")));
    }
    if analytic_grad.rows() != point.rows() || analytic_grad.cols() != point.cols() {
        return Err(Error::shape(format!(
            "gradient {}x{} vs point {}x{}",
            analytic_grad.rows(),
            analytic_grad.cols(),
            point.rows(),
            point.cols()
        )));
    }
    let floor = F::cast(1e-8);
    let two = F::cast(2.0);
    let mut scratch = point.clone();
    let mut worst = GradCheckResult {
        max_relative_error: F::zero(),
        worst_index: (0, 0),
    };
    for i in 0..point.rows() {
        for j in 0..point.cols() {
            let orig = scratch[(i, j)];
            scratch[(i, j)] = orig + h;
            let f_plus = f(&scratch);
            scratch[(i, j)] = orig - h;
            let f_minus = f(&scratch);
            scratch[(i, j)] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite evaluation at coordinate ({i}, {j})"
                )));
            }
            let numeric = (f_plus - f_minus) / (two * h);
            let analytic = analytic_grad[(i, j)];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            if rel > worst.max_relative_error {
                worst.max_relative_error = rel;
                worst.worst_index = (i, j);
            }
        }
    }
    Ok(worst)
}
