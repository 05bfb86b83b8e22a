//! Dense 64-bit vector and matrix arithmetic.
//!
//! Matrices are stored row-major. Everything here is a pure function of its
//! inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// A fixed-length real vector: a raw encoder output or a projected embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims("dot", self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding(values)
    }
}

impl std::ops::Index<usize> for Embedding {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn check_dims(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

const LANES: usize = 8;

/// Inner product, accumulated in `LANES` independent partial sums so the
/// loop vectorizes. The summation order is fixed, so results are
/// reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a·x`; a no-op when `a` is zero.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Scales `x` to unit length. Fails on (numerically) zero vectors.
pub fn l2_normalize(x: &Embedding) -> Result<Embedding> {
    let n = x.norm();
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize input".into()));
    }
    if n < ZERO_NORM {
        return Err(Error::Degenerate(
            "cannot normalize a zero vector".into(),
        ));
    }
    Ok(Embedding(x.0.iter().map(|v| v / n).collect()))
}

/// ⟨a,b⟩ / (‖a‖‖b‖).
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims("cosine_sim", a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
        check_dims("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dims("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims("matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dims("matvec_transposed", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(&mut out, yr, self.row(r));
        }
        Ok(out)
    }

    /// [`matvec`](Self::matvec) for every `x`, visiting each weight row once.
    /// Results are identical to the per-vector call.
    pub fn matvec_many(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            check_dims("matvec", self.cols, x.len())?;
        }
        let mut out = vec![vec![0.0; self.rows]; xs.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            for (o, x) in out.iter_mut().zip(xs) {
                o[r] = dot(row, x);
            }
        }
        Ok(out)
    }

    /// [`matvec_transposed`](Self::matvec_transposed) for every `y`, visiting
    /// each weight row once. Results are identical to the per-vector call.
    pub fn matvec_transposed_many(&self, ys: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for y in ys {
            check_dims("matvec_transposed", self.rows, y.len())?;
        }
        let mut out = vec![vec![0.0; self.cols]; ys.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            for (o, y) in out.iter_mut().zip(ys) {
                axpy(o, y[r], row);
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dims("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(a.len(), b.len());
        m.add_outer(a, b);
        m
    }

    /// `self += a bᵀ` without allocating.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        self.add_outer_many(&[a], &[b]);
    }

    /// `self += Σᵢ aᵢ bᵢᵀ`, row by row; each entry accumulates in index order.
    pub(crate) fn add_outer_many(&mut self, a: &[&[f64]], b: &[&[f64]]) {
        debug_assert!(a.iter().all(|v| v.len() == self.rows));
        debug_assert!(b.iter().all(|v| v.len() == self.cols));
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (ai, bi) in a.iter().zip(b) {
                axpy(row, ai[r], bi);
            }
        }
    }
}
