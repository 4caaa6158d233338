//! Dense row-major containers: [`HeadTensor`] for per-head activations and
//! [`Matrix`] for hidden states and weights.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Activations laid out as `(n_tokens, n_heads, head_dim)`, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<T> {
    data: Vec<T>,
    n_tokens: usize,
    n_heads: usize,
    head_dim: usize,
}

impl<T: Real> HeadTensor<T> {
    pub fn new(data: Vec<T>, n_tokens: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        if data.len() != n_tokens * n_heads * head_dim {
            return Err(shape_err(format!(
                "data length {} does not match shape ({n_tokens}, {n_heads}, {head_dim})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { data, n_tokens, n_heads, head_dim })
    }

    pub fn zeros(n_tokens: usize, n_heads: usize, head_dim: usize) -> Self {
        Self { data: vec![T::zero(); n_tokens * n_heads * head_dim], n_tokens, n_heads, head_dim }
    }

    /// Reinterprets an `(n_tokens, n_heads * head_dim)` matrix.
    pub fn from_matrix(m: Matrix<T>, n_heads: usize, head_dim: usize) -> Result<Self> {
        if m.cols() != n_heads * head_dim {
            return Err(shape_err(format!(
                "matrix width {} is not {n_heads} heads x {head_dim}",
                m.cols()
            )));
        }
        let rows = m.rows();
        Self::new(m.into_vec(), rows, n_heads, head_dim)
    }

    pub fn into_matrix(self) -> Matrix<T> {
        let cols = self.n_heads * self.head_dim;
        Matrix::from_parts(self.n_tokens, cols, self.data)
    }

    pub(crate) fn from_parts(data: Vec<T>, n_tokens: usize, n_heads: usize, head_dim: usize) -> Self {
        debug_assert_eq!(data.len(), n_tokens * n_heads * head_dim);
        Self { data, n_tokens, n_heads, head_dim }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_tokens, self.n_heads, self.head_dim)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn head(&self, token: usize, head: usize) -> &[T] {
        let off = (token * self.n_heads + head) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    #[inline]
    pub fn head_mut(&mut self, token: usize, head: usize) -> &mut [T] {
        let off = (token * self.n_heads + head) * self.head_dim;
        &mut self.data[off..off + self.head_dim]
    }

    /// All heads of one token.
    pub fn token(&self, token: usize) -> &[T] {
        let w = self.n_heads * self.head_dim;
        &self.data[token * w..(token + 1) * w]
    }

    /// Copy of tokens `[start, end)`.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Self {
        let w = self.n_heads * self.head_dim;
        Self::from_parts(self.data[start * w..end * w].to_vec(), end - start, self.n_heads, self.head_dim)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn cast<U: Real>(&self) -> HeadTensor<U> {
        HeadTensor::from_parts(
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            self.n_tokens,
            self.n_heads,
            self.head_dim,
        )
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// `self · rhs`. Each output row accumulates over the inner dimension in
    /// ascending order, so a row's result does not depend on how many rows
    /// are multiplied together.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                let b = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += aik * bj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != rhs.rows {
            return Err(shape_err(format!(
                "t_matmul {}x{} (transposed) by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (i, &ai) in a.iter().enumerate() {
                let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.cols {
            return Err(shape_err(format!(
                "matmul_t {}x{} by {}x{} (transposed)",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..rhs.rows {
                out.data[r * rhs.rows + c] = crate::real::dot(a, rhs.row(c));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Matrix<T>) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(shape_err("add of mismatched matrices"));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_parts(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in max_abs_diff");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
