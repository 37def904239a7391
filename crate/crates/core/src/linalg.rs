//! Dense row-major matrices, Gram statistics and the ridge-regularized
//! right-solve that realizes every `(...)^-1` in the merge equations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LormError, Result};

/// Ridge applied to every merge denominator, relative to its mean diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Dense matrix of `f64` in row-major order.
///
/// Constructors reject non-finite entries; serialization goes through the
/// same check, so a deserialized matrix is always well formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LormError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LormError::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols} = {}",
                data.len(),
                rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LormError::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LormError::invalid("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// A `len x 1` column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// I.i.d. Gaussian entries with mean zero.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        if std == 0.0 {
            return Matrix::zeros(rows, cols);
        }
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LormError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, p);
        for i in 0..n {
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(LormError::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(n, p);
        for i in 0..n {
            let a = &self.data[i * m..(i + 1) * m];
            for j in 0..p {
                let b = &rhs.data[j * m..(j + 1) * m];
                out.data[i * p + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LormError::DimensionMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (m, n, p) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, p);
        for k in 0..m {
            let a_row = &self.data[k * n..(k + 1) * n];
            let b_row = &rhs.data[k * p..(k + 1) * p];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * p..(i + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(LormError::DimensionMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        Ok(self.zip_map(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "sub")?;
        Ok(self.zip_map(rhs, |a, b| a - b))
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "hadamard")?;
        Ok(self.zip_map(rhs, |a, b| a * b))
    }

    /// In-place `self += alpha * rhs`.
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn zip_map(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Multiplies row `i` by `factors[i]`, i.e. `diag(factors) * self`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(LormError::DimensionMismatch {
                op: "scale_rows",
                left: self.shape(),
                right: (factors.len(), 1),
            });
        }
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Adds `values[i]` to every entry of row `i`.
    pub fn add_to_rows(&self, values: &[f64]) -> Result<Matrix> {
        if values.len() != self.rows {
            return Err(LormError::DimensionMismatch {
                op: "add_to_rows",
                left: self.shape(),
                right: (values.len(), 1),
            });
        }
        let mut out = self.clone();
        for (i, &b) in values.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `indices` of `self`, in the given order.
    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for i in 0..self.rows {
            for (j, &c) in indices.iter().enumerate() {
                out.data[i * indices.len() + j] = self.data[i * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row block out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically; all must share the column count.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(LormError::DimensionMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: b.shape(),
                });
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates matrices horizontally; all must share the row count.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, Matrix::rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(LormError::DimensionMismatch {
                op: "hstack",
                left: (rows, 0),
                right: b.shape(),
            });
        }
        let cols = blocks.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + b.cols].copy_from_slice(b.row(i));
            }
            offset += b.cols;
        }
        Ok(out)
    }

    /// Largest absolute asymmetry `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Relative Frobenius distance `||self - other|| / max(||other||, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accumulated input second moment `X X^T` of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramStat {
    pub gram: Matrix,
    pub samples: usize,
    pub diagonal_only: bool,
}

impl GramStat {
    pub fn zeros(dim: usize) -> Self {
        GramStat {
            gram: Matrix::zeros(dim, dim),
            samples: 0,
            diagonal_only: false,
        }
    }

    /// Gram of a single batch of column inputs.
    pub fn from_inputs(inputs: &Matrix) -> Self {
        GramStat::zeros(inputs.rows())
            .accumulate(inputs)
            .expect("dimensions agree by construction")
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    /// Adds `X X^T` of a `k x n` batch and counts its `n` samples.
    pub fn accumulate(&self, batch_inputs: &Matrix) -> Result<GramStat> {
        if batch_inputs.rows() != self.dim() {
            return Err(LormError::DimensionMismatch {
                op: "gram_accumulate",
                left: self.gram.shape(),
                right: batch_inputs.shape(),
            });
        }
        if self.diagonal_only {
            return Err(LormError::invalid(
                "cannot accumulate into a diagonal-only gram statistic",
            ));
        }
        let outer = batch_inputs.matmul_t(batch_inputs)?;
        Ok(GramStat {
            gram: self.gram.add(&outer)?,
            samples: self.samples + batch_inputs.cols(),
            diagonal_only: false,
        })
    }

    /// Scales off-diagonal entries by `gamma`; `gamma = 0` leaves the pure diagonal.
    pub fn decay_off_diagonal(&self, gamma: f64) -> Result<GramStat> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(LormError::invalid(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        let k = self.dim();
        let gram = Matrix::from_fn(k, k, |i, j| {
            let v = self.gram.get(i, j);
            if i == j {
                v
            } else if gamma == 0.0 {
                0.0
            } else {
                gamma * v
            }
        });
        Ok(GramStat {
            gram,
            samples: self.samples,
            diagonal_only: self.diagonal_only || gamma == 0.0,
        })
    }

    /// Entrywise sum of several statistics, folded in the given order.
    pub fn sum<'a>(stats: impl IntoIterator<Item = &'a GramStat>) -> Result<GramStat> {
        let mut iter = stats.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| LormError::invalid("cannot sum an empty list of gram statistics"))?;
        let mut total = first.clone();
        for s in iter {
            if s.dim() != total.dim() {
                return Err(LormError::DimensionMismatch {
                    op: "GramStat::sum",
                    left: total.gram.shape(),
                    right: s.gram.shape(),
                });
            }
            total.gram.axpy(1.0, &s.gram)?;
            total.samples += s.samples;
            total.diagonal_only &= s.diagonal_only;
        }
        Ok(total)
    }

    /// Number of values a client has to transmit for this statistic.
    pub fn transmitted_values(&self) -> usize {
        if self.diagonal_only {
            self.dim()
        } else {
            self.dim() * self.dim()
        }
    }
}

/// Spec-named alias of [`GramStat::accumulate`].
pub fn gram_accumulate(stat: &GramStat, batch_inputs: &Matrix) -> Result<GramStat> {
    stat.accumulate(batch_inputs)
}

/// Spec-named alias of [`GramStat::decay_off_diagonal`].
pub fn decay_off_diagonal(stat: &GramStat, gamma: f64) -> Result<GramStat> {
    stat.decay_off_diagonal(gamma)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Only the lower triangle of `m` is read.
fn cholesky(m: &Matrix, op: &'static str) -> Result<Matrix> {
    let n = m.rows();
    let max_diag = m.diag().into_iter().fold(0.0_f64, f64::max);
    let floor = max_diag * 1e-14;
    let mut l = Matrix::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for j in 0..n {
        let mut d = m.get(j, j);
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if !(d > floor) || !d.is_finite() {
            let condition = if d > 0.0 { max_pivot / d } else { f64::INFINITY };
            return Err(LormError::Singular {
                op,
                index: j,
                pivot: d,
                condition,
            });
        }
        min_pivot = min_pivot.min(d);
        max_pivot = max_pivot.max(d);
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Returns `numerator * (denominator + ridge * mean_diag * I)^-1`.
///
/// `mean_diag` is `trace(denominator) / k`, so `ridge` is relative to the
/// scale of the denominator. The solve goes through a Cholesky factorization;
/// no inverse is formed.
pub fn solve_right(numerator: &Matrix, denominator: &Matrix, ridge: f64) -> Result<Matrix> {
    let k = denominator.rows();
    if denominator.cols() != k || numerator.cols() != k {
        return Err(LormError::DimensionMismatch {
            op: "solve_right",
            left: numerator.shape(),
            right: denominator.shape(),
        });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(LormError::invalid(format!(
            "ridge must be finite and non-negative, got {ridge}"
        )));
    }
    if k == 0 {
        return Ok(numerator.clone());
    }
    let mut regularized = denominator.clone();
    let shift = ridge * denominator.trace() / k as f64;
    for i in 0..k {
        let v = regularized.get(i, i) + shift;
        regularized.set(i, i, v);
    }
    let l = cholesky(&regularized, "solve_right")?;

    // X G = N  <=>  G X^T = N^T; solve one row of N at a time.
    let mut out = Matrix::zeros(numerator.rows(), k);
    let mut y = vec![0.0; k];
    for r in 0..numerator.rows() {
        let rhs = numerator.row(r);
        for i in 0..k {
            let mut s = rhs[i];
            for p in 0..i {
                s -= l.get(i, p) * y[p];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..k).rev() {
            let mut s = y[i];
            for p in (i + 1)..k {
                s -= l.get(p, i) * out.get(r, p);
            }
            out.set(r, i, s / l.get(i, i));
        }
    }
    if !out.is_finite() {
        return Err(LormError::NonFinite("solve_right"));
    }
    Ok(out)
}
