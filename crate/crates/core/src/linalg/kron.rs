use rayon::prelude::*;

use crate::error::{data_err, Result};
use crate::linalg::haar::{check_dim, haar_from_rng};
use crate::matrix::{axpy, dot, Matrix};
use crate::rng::stream_rng;

/// Which side of `X` the orthogonal matrix multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Divisor pair `(p1, p2)` with `p1 * p2 = n` and `|p1 - p2|` minimal,
/// `p1 <= p2`. When the only split is `1 x n` and `n > 32`, returns `(n, 1)`:
/// a single dense factor.
pub fn factor_pair(n: usize) -> (usize, usize) {
    let mut p1 = (n as f64).sqrt() as usize;
    while p1 > 1 && n % p1 != 0 {
        p1 -= 1;
    }
    p1 = p1.max(1);
    if p1 == 1 && n > 32 {
        (n, 1)
    } else {
        (p1, n / p1)
    }
}

/// Orthogonal `K = L (x) R` acting on length-`p1 * p2` vectors. A vector is
/// reshaped row-major to `p1 x p2`, so `(L (x) R) vec(X) = vec(L X R^T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerOrthogonal {
    left: Matrix,
    right: Matrix,
}

impl KroneckerOrthogonal {
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if !left.is_square() || !right.is_square() {
            return data_err("Kronecker factors must be square");
        }
        Ok(KroneckerOrthogonal { left, right })
    }

    pub fn identity(n: usize) -> Self {
        KroneckerOrthogonal {
            left: Matrix::identity(n),
            right: Matrix::identity(1),
        }
    }

    /// Both factors Haar, drawn from streams `stream` and `stream + 1`.
    pub fn sample(p1: usize, p2: usize, seed: u64, stream: u64) -> Result<Self> {
        check_dim(p1)?;
        check_dim(p2)?;
        let left = haar_from_rng(p1, p1, &mut stream_rng(seed, stream));
        let right = haar_from_rng(p2, p2, &mut stream_rng(seed, stream + 1));
        Ok(KroneckerOrthogonal { left, right })
    }

    /// Haar factors for dimension `n` using [`factor_pair`].
    pub fn sample_for(n: usize, seed: u64, stream: u64) -> Result<Self> {
        let (p1, p2) = factor_pair(n);
        Self::sample(p1, p2, seed, stream)
    }

    pub fn dim(&self) -> usize {
        self.left.rows() * self.right.rows()
    }

    pub fn shapes(&self) -> (usize, usize) {
        (self.left.rows(), self.right.rows())
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    /// Explicit `n x n` matrix; for tests and small problems.
    pub fn dense(&self) -> Matrix {
        let (p1, p2) = self.shapes();
        Matrix::from_fn(p1 * p2, p1 * p2, |r, c| {
            self.left[(r / p2, c / p2)] * self.right[(r % p2, c % p2)]
        })
    }

    /// `Left`: `K X` or `K^T X`. `Right`: `X K` or `X K^T`.
    pub fn apply(&self, x: &Matrix, side: Side, transpose: bool) -> Result<Matrix> {
        let n = self.dim();
        match side {
            Side::Right => {
                if x.cols() != n {
                    return data_err(format!("expected {n} columns, got {}", x.cols()));
                }
                // row v -> v K is K^T v^T = vec(L^T V R); v K^T is vec(L V R^T)
                Ok(if transpose {
                    apply_rows(x, &self.left, &self.right)
                } else {
                    apply_rows(x, &self.left.transpose(), &self.right.transpose())
                })
            }
            Side::Left => {
                if x.rows() != n {
                    return data_err(format!("expected {n} rows, got {}", x.rows()));
                }
                let xt = x.transpose();
                Ok(self.apply(&xt, Side::Right, !transpose)?.transpose())
            }
        }
    }
}

/// Maps each row `v` (reshaped `p1 x p2`) to `vec(A V B^T)`.
fn apply_rows(x: &Matrix, a: &Matrix, b: &Matrix) -> Matrix {
    let (p1, p2) = (a.rows(), b.rows());
    let n = p1 * p2;
    let mut out = Matrix::zeros(x.rows(), n);
    if n == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(n)
        .zip(x.as_slice().par_chunks(n))
        .for_each_init(
            || vec![0.0; n],
            |t, (dst, src)| {
                for i in 0..p1 {
                    let vi = &src[i * p2..(i + 1) * p2];
                    for bb in 0..p2 {
                        t[i * p2 + bb] = dot(vi, b.row(bb));
                    }
                }
                dst.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..p1 {
                    let drow = &mut dst[r * p2..(r + 1) * p2];
                    for (i, &ari) in a.row(r).iter().enumerate() {
                        if ari != 0.0 {
                            axpy(ari, &t[i * p2..(i + 1) * p2], drow);
                        }
                    }
                }
            },
        );
    out
}
