//! Dense row-major matrices and a handful of slice helpers.
//!
//! `Matrix` is the only numeric container used across the crate. Row vectors
//! are `1×n` matrices; batches of samples are stacked as rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(1, values.len(), values.to_vec())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("lhs.cols == rhs.rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "axpy",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "frobenius_dot",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means over rows, as a plain vector.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalizes the columns of a square matrix with modified Gram-Schmidt
/// and returns the orthogonal factor of its QR decomposition.
///
/// Columns that collapse to (numerically) zero are reported as an error;
/// callers feeding Gaussian matrices hit this with probability zero.
pub fn orthogonal_factor(a: &Matrix) -> Result<Matrix> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::dim("orthogonal_factor", "square", format!("{n}x{m}")));
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..n).map(|r| a.get(r, c)).collect()).collect();
    for j in 0..n {
        for i in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let qi = &done[i];
            let proj = dot(qi, &rest[0]);
            for (v, q) in rest[0].iter_mut().zip(qi) {
                *v -= proj * q;
            }
        }
        let nrm = norm(&cols[j]);
        if nrm < 1e-12 {
            return Err(Error::Contract("rank-deficient input to orthogonal_factor".into()));
        }
        cols[j].iter_mut().for_each(|v| *v /= nrm);
    }
    let mut q = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            q.set(r, c, *v);
        }
    }
    Ok(q)
}
