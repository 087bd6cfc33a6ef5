//! Symmetric eigendecomposition.
//!
//! The default solver reduces to tridiagonal form with Householder reflections
//! and then runs implicit-shift QL (the EISPACK `tred2`/`tql2` pair). Cyclic
//! Jacobi is kept alongside as an independent solver; the two are cross-checked
//! in tests.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SymmetricPsd};

/// `H = Q diag(values) Q^T`, eigenvalues in descending order, eigenvectors as
/// the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub vectors: Matrix,
    pub values: Vec<f64>,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
                *v *= self.values[j];
            }
        }
        scaled
            .matmul(&self.vectors.transpose())
            .expect("square eigenvector matrix")
    }
}

pub fn sym_eig(h: &SymmetricPsd) -> Result<SymEig> {
    let (values, vt) = tridiagonal_ql(h.matrix(), true)?;
    Ok(sorted(values, vt))
}

/// Eigenvalues only, descending.
pub fn sym_eigvals(h: &SymmetricPsd) -> Result<Vec<f64>> {
    let (mut values, _) = tridiagonal_ql(h.matrix(), false)?;
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations. Stops once the off-diagonal Frobenius norm is at
/// most `1e-12 * ||H||_F`; gives up after 100 sweeps.
pub fn sym_eig_jacobi(h: &SymmetricPsd) -> Result<SymEig> {
    let n = h.n();
    let mut a = h.matrix().clone();
    // row r of `vt` is column r of the eigenvector matrix
    let mut vt = Matrix::identity(n);
    let target = 1e-12 * h.matrix().frobenius_norm();

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let g = a[(k, p)];
                    let hh = a[(k, q)];
                    let new_p = g - s * (hh + g * tau);
                    let new_q = hh + s * (g - hh * tau);
                    a[(k, p)] = new_p;
                    a[(p, k)] = new_p;
                    a[(k, q)] = new_q;
                    a[(q, k)] = new_q;
                }
                let (lo, hi) = vt.as_mut_slice().split_at_mut(q * n);
                let row_p = &mut lo[p * n..(p + 1) * n];
                let row_q = &mut hi[..n];
                for k in 0..n {
                    let g = row_p[k];
                    let hh = row_q[k];
                    row_p[k] = g - s * (hh + g * tau);
                    row_q[k] = hh + s * (g - hh * tau);
                }
            }
        }
    }
    Ok(sorted(a.diagonal(), vt))
}

/// Orders eigenpairs by descending eigenvalue; `vt` holds eigenvectors as rows.
fn sorted(values: Vec<f64>, vt: Matrix) -> SymEig {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (c, &src) in order.iter().enumerate() {
        for (r, &v) in vt.row(src).iter().enumerate() {
            vectors[(r, c)] = v;
        }
    }
    SymEig {
        vectors,
        values: order.iter().map(|&i| values[i]).collect(),
    }
}

/// Householder tridiagonalization followed by implicit QL.
///
/// The working array is stored transposed relative to the textbook
/// formulation so that the inner loops walk contiguous memory. Returns the
/// unsorted eigenvalues and, when requested, the eigenvectors as rows.
fn tridiagonal_ql(h: &Matrix, want_vectors: bool) -> Result<(Vec<f64>, Matrix)> {
    let n = h.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    // a[(c, r)] plays the role of V[r][c]; H is symmetric so the copy is exact
    let mut a = h.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];

    for j in 0..n {
        d[j] = a[(j, n - 1)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut hh = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = a[(j, i - 1)];
                a[(j, i)] = 0.0;
                a[(i, j)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                hh += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = hh.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            hh -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                a[(i, j)] = f;
                g = e[j] + a[(j, j)] * f;
                let row = a.row(j);
                for k in j + 1..i {
                    g += row[k] * d[k];
                    e[k] += row[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= hh;
                f += e[j] * d[j];
            }
            let hh2 = f / (hh + hh);
            for j in 0..i {
                e[j] -= hh2 * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let row = a.row_mut(j);
                for k in j..i {
                    row[k] -= f * e[k] + g * d[k];
                }
                d[j] = row[i - 1];
                row[i] = 0.0;
            }
        }
        d[i] = hh;
    }

    if want_vectors {
        for i in 0..n - 1 {
            a[(i, n - 1)] = a[(i, i)];
            a[(i, i)] = 1.0;
            let hh = d[i + 1];
            if hh != 0.0 {
                for k in 0..=i {
                    d[k] = a[(i + 1, k)] / hh;
                }
                for j in 0..=i {
                    let g = {
                        let (ri, rj) = (a.row(i + 1), a.row(j));
                        let mut g = 0.0;
                        for k in 0..=i {
                            g += ri[k] * rj[k];
                        }
                        g
                    };
                    let row = a.row_mut(j);
                    for k in 0..=i {
                        row[k] -= g * d[k];
                    }
                }
            }
            for k in 0..=i {
                a[(i + 1, k)] = 0.0;
            }
        }
        for j in 0..n {
            d[j] = a[(j, n - 1)];
            a[(j, n - 1)] = 0.0;
        }
        a[(n - 1, n - 1)] = 1.0;
    } else {
        for j in 0..n {
            d[j] = a[(j, j)];
        }
    }
    e[0] = 0.0;

    // implicit QL on the tridiagonal (d, e)
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(Error::Numerical(format!(
                        "QL iteration did not converge for eigenvalue {l}"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut hh = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= hh;
                }
                f += hh;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    hh = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = hh + s * (c * g + s * d[i]);
                    if want_vectors {
                        let (lo, hi) = a.as_mut_slice().split_at_mut((i + 1) * n);
                        let vi = &mut lo[i * n..(i + 1) * n];
                        let vi1 = &mut hi[..n];
                        for k in 0..n {
                            let t = vi1[k];
                            vi1[k] = s * vi[k] + c * t;
                            vi[k] = c * vi[k] - s * t;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok((d, a))
}

/// Principal square root; negative eigenvalues are clipped to zero.
pub fn psd_sqrt(h: &SymmetricPsd) -> Result<SymmetricPsd> {
    let eig = sym_eig(h)?;
    let root = SymEig {
        values: eig.values.iter().map(|&v| v.max(0.0).sqrt()).collect(),
        vectors: eig.vectors,
    };
    SymmetricPsd::from_symmetrized(root.reconstruct())
}

/// Moore-Penrose pseudo-inverse, discarding eigenvalues at or below
/// `rel_cutoff * lambda_max`.
pub fn pseudo_inverse(h: &SymmetricPsd, rel_cutoff: f64) -> Result<Matrix> {
    let eig = sym_eig(h)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let inv = SymEig {
        values: eig
            .values
            .iter()
            .map(|&v| if v > rel_cutoff * lmax { 1.0 / v } else { 0.0 })
            .collect(),
        vectors: eig.vectors,
    };
    let mut m = inv.reconstruct();
    m.symmetrize();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psd(rows: &[&[f64]]) -> SymmetricPsd {
        SymmetricPsd::new(Matrix::from_rows(rows)).unwrap()
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.transpose()
            .matmul(q)
            .unwrap()
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn diagonal_spectrum() {
        let h = SymmetricPsd::diag(&[1.0, 3.0]).unwrap();
        for eig in [sym_eig(&h).unwrap(), sym_eig_jacobi(&h).unwrap()] {
            assert_eq!(eig.values, vec![3.0, 1.0]);
            assert_eq!(eig.vectors.max_abs(), 1.0);
            assert_eq!(eig.vectors[(1, 0)].abs(), 1.0);
        }
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // lambda^2 - 4 lambda + 3 = 0
        let h = psd(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let tr = 4.0;
        let det = 3.0;
        let disc: f64 = tr * tr - 4.0 * det;
        let oracle = [(tr + disc.sqrt()) / 2.0, (tr - disc.sqrt()) / 2.0];
        for eig in [sym_eig(&h).unwrap(), sym_eig_jacobi(&h).unwrap()] {
            assert!((eig.values[0] - oracle[0]).abs() < 1e-14);
            assert!((eig.values[1] - oracle[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_one() {
        let v = [1.0, -2.0, 0.5, 3.0];
        let m = Matrix::from_fn(4, 4, |i, j| v[i] * v[j]);
        let h = SymmetricPsd::new(m).unwrap();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        let eig = sym_eig(&h).unwrap();
        assert!((eig.values[0] - norm2).abs() < 1e-12);
        for &l in &eig.values[1..] {
            assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn solvers_agree_and_reconstruct() {
        let n = 23;
        let m = Matrix::from_fn(n, n, |i, j| {
            let (a, b) = (i.min(j) as f64, i.max(j) as f64);
            ((a + 1.0) * 0.37 + (b + 2.0) * 1.13).sin() + if i == j { 3.0 } else { 0.0 }
        });
        let h = SymmetricPsd::new(m).unwrap();
        let ql = sym_eig(&h).unwrap();
        let jac = sym_eig_jacobi(&h).unwrap();
        let hn = h.matrix().frobenius_norm();
        for (a, b) in ql.values.iter().zip(&jac.values) {
            assert!((a - b).abs() < 1e-10 * hn);
        }
        for eig in [&ql, &jac] {
            assert!(eig.reconstruct().sub(h.matrix()).unwrap().frobenius_norm() <= 1e-8 * hn);
            assert!(orthonormality_error(&eig.vectors) <= 1e-10);
        }
        let vals = sym_eigvals(&h).unwrap();
        for (a, b) in vals.iter().zip(&ql.values) {
            assert!((a - b).abs() < 1e-10 * hn);
        }
    }

    #[test]
    fn sqrt_examples() {
        let h = SymmetricPsd::new(Matrix::identity(3).scale(4.0)).unwrap();
        let r = psd_sqrt(&h).unwrap();
        assert!(r.matrix().sub(&Matrix::identity(3).scale(2.0)).unwrap().max_abs() < 1e-14);
        let h = SymmetricPsd::diag(&[9.0, 1.0]).unwrap();
        let r = psd_sqrt(&h).unwrap();
        assert!(r.matrix().sub(&Matrix::diag(&[3.0, 1.0])).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn pseudo_inverse_of_singular() {
        let h = psd(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let p = pseudo_inverse(&h, 1e-10).unwrap();
        // pinv of 2 * (uu^T), u = (1,1)/sqrt2, is (1/2) uu^T
        for v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }
}
