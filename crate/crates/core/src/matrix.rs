//! Dense row-major matrices and the validated symmetric PSD wrapper.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{data_err, Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return data_err(format!(
                "matrix data has {} values, expected {rows}x{cols} = {}",
                data.len(),
                rows * cols
            ));
        }
        Ok(Matrix { rows, cols, data })
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

    /// Builds a matrix from nested row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                t.data[j * self.rows + i] = v;
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return data_err(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self^T * self`, exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let x = self.row(r);
            for i in 0..n {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let g_row = &mut g.data[i * n + i..(i + 1) * n];
                axpy(xi, &x[i..], g_row);
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return data_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
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

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry of `self - self^T`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces `self` with `(self + self^T) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    /// Bilinear form `x^T A y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.rows).map(|i| x[i] * dot(self.row(i), y)).sum()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let shown: Vec<String> = self
                .row(i)
                .iter()
                .take(8)
                .map(|v| format!("{v:10.4}"))
                .collect();
            writeln!(f, "  {}{}", shown.join(" "), if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Square symmetric positive semi-definite matrix (a proxy Hessian).
///
/// Construction checks shape, finiteness and symmetry; the eigenvalue test is
/// a separate, more expensive call ([`SymmetricPsd::validate_psd`]).
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricPsd(Matrix);

impl SymmetricPsd {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return data_err(format!("expected a square matrix, got {:?}", m.shape()));
        }
        if !m.all_finite() {
            return data_err("matrix contains non-finite entries");
        }
        let n = m.rows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return data_err(format!(
                        "matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    ));
                }
            }
        }
        Ok(SymmetricPsd(m))
    }

    /// Symmetrizes first; for matrices that are symmetric up to rounding.
    pub fn from_symmetrized(mut m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return data_err(format!("expected a square matrix, got {:?}", m.shape()));
        }
        m.symmetrize();
        SymmetricPsd::new(m)
    }

    pub fn identity(n: usize) -> Self {
        SymmetricPsd(Matrix::identity(n))
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0)) {
            return data_err("diagonal PSD matrix needs non-negative entries");
        }
        Ok(SymmetricPsd(Matrix::diag(values)))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == 0.0))
    }

    /// Smallest eigenvalue must be at least `-1e-8 * tr(H) / n`.
    pub fn validate_psd(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Ok(());
        }
        let eig = crate::linalg::sym_eigvals(self)?;
        let min = eig.last().copied().unwrap_or(0.0);
        let tol = 1e-8 * self.trace().abs() / n as f64;
        if min < -tol {
            return Err(Error::Data(format!(
                "matrix is not positive semi-definite: smallest eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = a.transpose();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[14.0, 32.0], &[32.0, 77.0]]));
        assert_eq!(a.gram(), b.matmul(&a).unwrap());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }

    #[test]
    fn psd_rejects_asymmetric_and_nonfinite() {
        assert!(SymmetricPsd::new(Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]])).is_err());
        assert!(SymmetricPsd::new(Matrix::from_rows(&[&[f64::NAN]])).is_err());
        assert!(SymmetricPsd::new(Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn psd_validation_catches_indefinite() {
        let h = SymmetricPsd::new(Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert!(h.validate_psd().is_err());
        let h = SymmetricPsd::new(Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!(h.validate_psd().is_ok());
    }
}
