use crate::error::{data_err, Error, Result};
use crate::matrix::{axpy, dot, Matrix, SymmetricPsd};

/// `H = (U + I) diag(d) (U + I)^T` with `U` strictly upper triangular.
#[derive(Clone, Debug)]
pub struct LdlFactors {
    pub u_strict: Matrix,
    pub d: Vec<f64>,
}

impl LdlFactors {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn trace_d(&self) -> f64 {
        self.d.iter().sum()
    }

    /// `U + I`.
    pub fn unit_upper(&self) -> Matrix {
        let mut m = self.u_strict.clone();
        for i in 0..self.n() {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// `(U + I) diag(d) (U + I)^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.n();
        let l = self.unit_upper();
        let mut scaled = l.clone();
        for i in 0..n {
            for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
                *v *= self.d[j];
            }
        }
        scaled.matmul(&l.transpose()).expect("square factors")
    }
}

/// LDL factorization in the upper-triangular convention.
///
/// Right-looking elimination from the last column to the first. A pivot below
/// `1e-12 * tr(H) / n` is treated as exactly singular: its `d` entry and the
/// matching column of `U` are set to zero. A clearly negative pivot means the
/// input is indefinite and is reported as a numerical error.
pub fn ldl_decompose(h: &SymmetricPsd) -> Result<LdlFactors> {
    let n = h.n();
    let mut a = h.matrix().clone();
    let mut u = Matrix::zeros(n, n);
    let mut d = vec![0.0; n];
    if n == 0 {
        return Ok(LdlFactors { u_strict: u, d });
    }
    let mean_diag = h.trace() / n as f64;
    let singular = 1e-12 * mean_diag;
    let indefinite = -1e-7 * mean_diag.abs();

    // only the lower triangle of `a` is kept current
    let mut pivot_row = vec![0.0; n];
    for k in (0..n).rev() {
        let dk = a[(k, k)];
        if dk <= singular {
            if dk < indefinite {
                return Err(Error::Numerical(format!(
                    "negative pivot {dk:.3e} at column {k}: matrix is not PSD"
                )));
            }
            continue;
        }
        d[k] = dk;
        pivot_row[..k].copy_from_slice(&a.row(k)[..k]);
        for i in 0..k {
            u[(i, k)] = pivot_row[i] / dk;
        }
        for i in 0..k {
            let vi = pivot_row[i];
            if vi == 0.0 {
                continue;
            }
            let ui = vi / dk;
            axpy(-ui, &pivot_row[..=i], &mut a.row_mut(i)[..=i]);
        }
    }
    Ok(LdlFactors { u_strict: u, d })
}

/// Inverse of a unit upper-triangular matrix `U + I` given its strict part.
pub fn unit_upper_inverse(u_strict: &Matrix) -> Result<Matrix> {
    if !u_strict.is_square() {
        return data_err("unit_upper_inverse needs a square matrix");
    }
    let n = u_strict.rows();
    // column j of T solves (U + I) t = e_j, back substitution upward
    let mut t = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col[..=j].iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        for i in (0..j).rev() {
            col[i] = -dot(&u_strict.row(i)[i + 1..=j], &col[i + 1..=j]);
        }
        for i in 0..=j {
            t[(i, j)] = col[i];
        }
    }
    Ok(t)
}

/// Lower Cholesky factor `A = L L^T`; `None` if a pivot is not positive.
pub fn cholesky_lower(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(s > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let v = (a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j])) / ljj;
            l[(i, j)] = v;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of a PSD matrix; pivots at or below `tol` give zero
/// columns instead of failing.
pub fn cholesky_lower_semidefinite(a: &Matrix, tol: f64) -> Matrix {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if s <= tol {
            continue;
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let v = (a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j])) / ljj;
            l[(i, j)] = v;
        }
    }
    l
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Matrix) -> Option<Matrix> {
    let l = cholesky_lower(a)?;
    let n = a.rows();
    // rows of L^{-T}... compute X = L^{-1} column by column (forward substitution)
    let mut linv_t = Matrix::zeros(n, n); // row j holds column j of L^{-1}
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0 / l[(j, j)];
        for i in j + 1..n {
            let s = dot(&l.row(i)[j..i], &col[j..i]);
            col[i] = -s / l[(i, i)];
        }
        linv_t.row_mut(j).copy_from_slice(&col);
    }
    // A^{-1} = L^{-T} L^{-1}; entry (i, k) = sum_r Linv[r][i] Linv[r][k] = <col i, col k>
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..=i {
            let start = i.max(k);
            let v = dot(&linv_t.row(i)[start..], &linv_t.row(k)[start..]);
            inv[(i, k)] = v;
            inv[(k, i)] = v;
        }
    }
    Some(inv)
}
