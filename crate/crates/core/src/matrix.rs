//! Dense row-major `f64` matrices.
//!
//! This is the carrier type for every tensor in the crate: sequences,
//! projection weights, attention maps. Storage is a flat `Vec<f64>` in
//! row-major order. The multiply kernels are written so the inner loops
//! run over contiguous rows and auto-vectorize.

use crate::error::CoreError;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, CoreError> {
        if data.len() != rows * cols {
            return Err(CoreError::shape(
                "Matrix::from_vec",
                format!("data length {} != {rows}x{cols}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, CoreError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(CoreError::shape("Matrix::from_rows", "ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix with i.i.d. standard-normal entries scaled by `std`,
    /// drawn in row-major order.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        if self.cols != other.rows {
            return Err(CoreError::shape(
                "matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, p);
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = out.row_mut(i);
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        }
        let _ = n;
        Ok(out)
    }

    /// `self * other^T`. Materializes the transpose so the product runs on
    /// the broadcast kernel instead of latency-bound row dot products; the
    /// summation order (and hence the result) is identical.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        if self.cols != other.cols {
            return Err(CoreError::shape(
                "matmul_nt",
                format!(
                    "{}x{} * ({}x{})^T",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        self.matmul(&other.transpose())
    }

    /// `self^T * other`; accumulated as a sum of row outer products.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        if self.rows != other.rows {
            return Err(CoreError::shape(
                "matmul_tn",
                format!(
                    "({}x{})^T * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, p) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, p);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &aki) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * p..(i + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += aki * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, CoreError> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), CoreError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CoreError::shape(
                "add_assign",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, CoreError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CoreError::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| sum_squares(self.row(i)).sqrt())
            .collect()
    }

    /// Largest absolute entrywise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Sum of squares with four independent accumulator lanes, so the reduction
/// vectorizes instead of forming one serial dependency chain.
pub(crate) fn sum_squares(row: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        lanes[0] += c[0] * c[0];
        lanes[1] += c[1] * c[1];
        lanes[2] += c[2] * c[2];
        lanes[3] += c[3] * c[3];
    }
    let mut total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for &v in chunks.remainder() {
        total += v * v;
    }
    total
}
