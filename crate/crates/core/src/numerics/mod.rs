//! Dense f64 linear algebra, just enough for affine chains and denoiser
//! training: row-major matrices, vectors, products, outer products, norms.
//!
//! Everything is plain loops over `Vec<f64>`. No BLAS, no SIMD intrinsics,
//! no sparse storage; shapes here top out in the hundreds, where the simple
//! code wins on auditability and loses nothing measurable on speed.

mod rng;

pub mod io;

pub use rng::{gaussian, Rng};

use crate::error::{Error, Result};

/// Row-major dense matrix. Treat as immutable once built; the crate mutates
/// only matrices it privately owns (training accumulators).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from a row-major buffer. Fails if the buffer length does not
    /// equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                what: "matrix buffer length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but rejects NaN/infinite entries. Used by
    /// file loaders and generators, where non-finite data means corruption.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { what: "matrix entries" });
        }
        Matrix::from_vec(rows, cols, data)
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_vector(&self, i: usize) -> Vector {
        Vector::from_vec(self.row(i).to_vec())
    }

    /// Stack vectors as rows. All rows must share one dimension.
    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyData { what: "matrix rows" });
        };
        let cols = first.dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.dim() != cols {
                return Err(Error::DimMismatch {
                    what: "row length",
                    expected: cols,
                    got: r.dim(),
                });
            }
            data.extend_from_slice(r.as_slice());
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (self.rows, self.cols),
                rhs: (rhs.rows, rhs.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(lhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.dim() {
            return Err(Error::ShapeMismatch {
                op: "mul_vec",
                lhs: (self.rows, self.cols),
                rhs: (v.dim(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.as_slice()) {
                acc += a * b;
            }
            *o = acc;
        }
        Ok(Vector::from_vec(out))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "matrix add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "matrix sub", |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch { op, lhs: self.shape(), rhs: rhs.shape() });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// `self += c * (u ⊗ v)`, the rank-1 update at the core of the training
    /// loop. Crate-private: public matrices stay immutable.
    pub(crate) fn add_scaled_outer(&mut self, c: f64, u: &Vector, v: &Vector) {
        debug_assert_eq!(self.rows, u.dim());
        debug_assert_eq!(self.cols, v.dim());
        for i in 0..self.rows {
            let cu = c * u.as_slice()[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, b) in row.iter_mut().zip(v.as_slice()) {
                *r += cu * b;
            }
        }
    }

    /// `self += c * other`, elementwise. Crate-private for the same reason.
    pub(crate) fn add_scaled(&mut self, c: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dense f64 column vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, rhs: &Vector) -> Result<f64> {
        if self.dim() != rhs.dim() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: (self.dim(), 1),
                rhs: (rhs.dim(), 1),
            });
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, rhs: &Vector) -> Result<Vector> {
        self.zip_with(rhs, "vector add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Vector) -> Result<Vector> {
        self.zip_with(rhs, "vector sub", |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Vector, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        if self.dim() != rhs.dim() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: (self.dim(), 1),
                rhs: (rhs.dim(), 1),
            });
        }
        Ok(Vector::from_vec(
            self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        ))
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector::from_vec(self.data.iter().map(|x| x * c).collect())
    }

    /// `self + c * rhs` without mutating either operand.
    pub fn add_scaled(&self, c: f64, rhs: &Vector) -> Result<Vector> {
        self.zip_with(rhs, "add_scaled", |a, b| a + c * b)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Vector) -> Result<f64> {
        if self.dim() != rhs.dim() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: (self.dim(), 1),
                rhs: (rhs.dim(), 1),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Outer product `u ⊗ v` as a `u.dim() x v.dim()` matrix.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut m = Matrix::zeros(u.dim(), v.dim());
    m.add_scaled_outer(1.0, u, v);
    m
}
