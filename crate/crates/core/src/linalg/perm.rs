use rand::seq::SliceRandom;

use crate::error::{data_err, Result};
use crate::matrix::{Matrix, SymmetricPsd};
use crate::rng::stream_rng;

/// `out[i] = x[perm[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn from_vec(p: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; p.len()];
        for &i in &p {
            if i >= p.len() || seen[i] {
                return data_err("permutation indices must be a bijection on 0..n");
            }
            seen[i] = true;
        }
        Ok(Permutation(p))
    }

    /// Uniform random permutation drawn from `(seed, stream)`.
    pub fn random(n: usize, seed: u64, stream: u64) -> Self {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut stream_rng(seed, stream));
        Permutation(p)
    }

    /// Indices sorting `keys` in descending order (stable).
    pub fn sort_descending(keys: &[f64]) -> Self {
        let mut p: Vec<usize> = (0..keys.len()).collect();
        p.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
        Permutation(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }

    pub fn apply<T: Clone>(&self, x: &[T]) -> Vec<T> {
        self.0.iter().map(|&p| x[p].clone()).collect()
    }

    /// Row `i` of the result is row `perm[i]` of `m`.
    pub fn permute_rows(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.rows(), self.len());
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for (i, &p) in self.0.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(p));
        }
        out
    }

    /// Column `j` of the result is column `perm[j]` of `m`.
    pub fn permute_cols(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.cols(), self.len());
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let src = m.row(r);
            for (dst, &p) in out.row_mut(r).iter_mut().zip(&self.0) {
                *dst = src[p];
            }
        }
        out
    }

    /// `P H P^T` with `(P H P^T)[i][j] = H[perm[i]][perm[j]]`.
    pub fn permute_sym(&self, h: &SymmetricPsd) -> SymmetricPsd {
        let m = self.permute_cols(&self.permute_rows(h.matrix()));
        SymmetricPsd::from_symmetrized(m).expect("permutation keeps symmetry")
    }
}
