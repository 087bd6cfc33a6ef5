use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{data_err, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::{stream_rng, streams};

/// Haar-distributed `p x p` orthogonal matrix drawn from `(seed, HAAR)`.
pub fn sample_haar_orthogonal(p: usize, seed: u64) -> Result<Matrix> {
    check_dim(p)?;
    let mut rng = stream_rng(seed, streams::HAAR);
    Ok(haar_from_rng(p, p, &mut rng))
}

/// First `k` columns of a Haar orthogonal `p x p` matrix.
///
/// Householder QR of a Gaussian matrix, with each column of `Q` multiplied by
/// the sign of the matching diagonal entry of `R` so the law is exactly Haar.
pub fn haar_from_rng<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> Matrix {
    assert!(k <= p, "thin factor cannot have more columns than rows");
    // zt row j is column j of the Gaussian matrix
    let mut zt = Matrix::from_fn(k, p, |_, _| rng.sample(StandardNormal));
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);
    let mut signs = vec![1.0; k];
    for j in 0..k {
        let x = &zt.row(j)[j..];
        let norm = dot(x, x).sqrt();
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        signs[j] = if alpha < 0.0 { -1.0 } else { 1.0 };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        let beta = if vv > 0.0 { 2.0 / vv } else { 0.0 };
        for c in j + 1..k {
            let col = &mut zt.row_mut(c)[j..];
            let s = beta * dot(&v, col);
            for (ci, vi) in col.iter_mut().zip(&v) {
                *ci -= s * vi;
            }
        }
        reflectors.push((v, beta));
    }
    // accumulate Q = H_0 ... H_{k-1} [I_k; 0], column c stored as row c
    let mut qt = Matrix::from_fn(k, p, |c, r| if c == r { 1.0 } else { 0.0 });
    for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
        for c in j..k {
            let col = &mut qt.row_mut(c)[j..];
            let s = beta * dot(v, col);
            for (ci, vi) in col.iter_mut().zip(v) {
                *ci -= s * vi;
            }
        }
    }
    Matrix::from_fn(p, k, |r, c| signs[c] * qt[(c, r)])
}

/// `||Q^T Q - I||_F`.
pub fn orthogonality_error(q: &Matrix) -> f64 {
    let k = q.cols();
    let mut err = 0.0;
    let qt = q.transpose();
    for i in 0..k {
        for j in 0..k {
            let v = dot(qt.row(i), qt.row(j)) - if i == j { 1.0 } else { 0.0 };
            err += v * v;
        }
    }
    err.sqrt()
}

pub(crate) fn check_dim(p: usize) -> Result<()> {
    if p == 0 {
        return data_err("orthogonal factor dimension must be positive");
    }
    Ok(())
}
