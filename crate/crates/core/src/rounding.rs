//! Grid rounding kernels: scalar quantizers, rounding with linear feedback,
//! LDLQ, an OPTQ-style reference, and greedy coordinate descent.
//!
//! All kernels treat rows independently and run them in parallel. Stochastic
//! rounding draws from one generator per row, so results do not depend on the
//! thread count.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{data_err, Result};
use crate::linalg::{
    cholesky_lower_semidefinite, ldl_decompose, pseudo_inverse, spd_inverse, LdlFactors,
    Permutation,
};
use crate::matrix::{axpy, dot, Matrix, SymmetricPsd};
use crate::rng::{stream_rng, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subroutine {
    Nearest,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundingConfig {
    pub bits: u32,
    pub subroutine: Subroutine,
    /// Only used by the stochastic subroutine.
    pub seed: u64,
    /// Clamp to `[0, 2^b - 1]`. Off means rounding onto all integers.
    pub clamp: bool,
}

impl RoundingConfig {
    pub fn nearest(bits: u32) -> Self {
        RoundingConfig {
            bits,
            subroutine: Subroutine::Nearest,
            seed: 0,
            clamp: true,
        }
    }

    pub fn stochastic(bits: u32, seed: u64) -> Self {
        RoundingConfig {
            bits,
            subroutine: Subroutine::Stochastic,
            seed,
            clamp: true,
        }
    }

    pub fn unclamped(mut self) -> Self {
        self.clamp = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return data_err(format!("bits must be in 2..=16, got {}", self.bits));
        }
        Ok(())
    }

    pub fn max_code(&self) -> f64 {
        max_code(self.bits)
    }

    fn row_rng(&self, row: usize) -> Option<ChaCha20Rng> {
        match self.subroutine {
            Subroutine::Nearest => None,
            Subroutine::Stochastic => {
                Some(stream_rng(self.seed, streams::ROUNDING_ROWS + row as u64))
            }
        }
    }

    /// Returns `(unclamped, final)` grid values for `x`.
    #[inline]
    fn quantize(&self, x: f64, rng: Option<&mut ChaCha20Rng>) -> (f64, f64) {
        let q = match rng {
            None => x.round(),
            Some(rng) => stochastic_integer(x, rng),
        };
        let out = if self.clamp { q.clamp(0.0, self.max_code()) } else { q };
        (q, out)
    }
}

pub fn max_code(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// Nearest grid value; halves round away from zero, then clamp.
pub fn q_near(x: f64, bits: u32) -> f64 {
    x.round().clamp(0.0, max_code(bits))
}

/// Unbiased rounding: up with probability `frac(x)`, then clamp.
pub fn q_stoch<R: Rng + ?Sized>(x: f64, bits: u32, rng: &mut R) -> f64 {
    stochastic_integer(x, rng).clamp(0.0, max_code(bits))
}

#[inline]
fn stochastic_integer<R: Rng + ?Sized>(x: f64, rng: &mut R) -> f64 {
    let lo = x.floor();
    let frac = x - lo;
    let u: f64 = rng.random();
    if u < frac {
        lo + 1.0
    } else {
        lo
    }
}

/// Strictly upper-triangular feedback matrix. Entries on or below the
/// diagonal of the source are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMatrix(Matrix);

impl FeedbackMatrix {
    pub fn new(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return data_err("feedback matrix must be square");
        }
        if !m.all_finite() {
            return data_err("feedback matrix has non-finite entries");
        }
        let n = m.rows();
        Ok(FeedbackMatrix(Matrix::from_fn(n, n, |i, j| {
            if j > i {
                m[(i, j)]
            } else {
                0.0
            }
        })))
    }

    pub fn zeros(n: usize) -> Self {
        FeedbackMatrix(Matrix::zeros(n, n))
    }

    pub fn from_ldl(f: &LdlFactors) -> Self {
        FeedbackMatrix(f.u_strict.clone())
    }

    /// `(H ⊙ M) diag(H)^{-1}` with `M` the strictly upper mask.
    pub fn greedy(h: &SymmetricPsd) -> Result<Self> {
        let hd = checked_diag(h)?;
        let n = h.n();
        Ok(FeedbackMatrix(Matrix::from_fn(n, n, |i, j| {
            if j > i {
                h.matrix()[(i, j)] / hd[j]
            } else {
                0.0
            }
        })))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Per-step record of a feedback rounding run.
#[derive(Clone, Debug)]
pub struct RoundingTrace {
    /// `Q(arg) - arg` before clamping.
    pub eta: Matrix,
    /// Number of entries where the clamp changed the value.
    pub clamp_count: usize,
    /// Number of quantizer arguments outside `[0, 2^b - 1]`.
    pub out_of_range: usize,
}

/// `W_hat = Q(W + (W - W_hat) U)`, column by column.
pub fn round_with_linear_feedback(
    w: &Matrix,
    u: &FeedbackMatrix,
    cfg: &RoundingConfig,
) -> Result<Matrix> {
    Ok(round_with_linear_feedback_traced(w, u, cfg)?.0)
}

pub fn round_with_linear_feedback_traced(
    w: &Matrix,
    u: &FeedbackMatrix,
    cfg: &RoundingConfig,
) -> Result<(Matrix, RoundingTrace)> {
    cfg.validate()?;
    let (m, n) = w.shape();
    if u.n() != n {
        return data_err(format!(
            "feedback is {}x{} but weights have {n} columns",
            u.n(),
            u.n()
        ));
    }
    check_finite(w)?;
    let mut out = Matrix::zeros(m, n);
    let mut eta = Matrix::zeros(m, n);
    if n == 0 {
        return Ok((
            out,
            RoundingTrace {
                eta,
                clamp_count: 0,
                out_of_range: 0,
            },
        ));
    }
    let um = u.matrix();
    let top = cfg.max_code();
    let (clamps, outside) = out
        .as_mut_slice()
        .par_chunks_mut(n)
        .zip(eta.as_mut_slice().par_chunks_mut(n))
        .zip(w.as_slice().par_chunks(n))
        .enumerate()
        .map(|(row, ((q, e), wr))| {
            let mut rng = cfg.row_rng(row);
            // acc[k] = sum_{j<k} (w_j - q_j) U[j][k], built as columns finish
            let mut acc = vec![0.0; n];
            let (mut clamps, mut outside) = (0, 0);
            for k in 0..n {
                let arg = wr[k] + acc[k];
                if !(0.0..=top).contains(&arg) {
                    outside += 1;
                }
                let (raw, val) = cfg.quantize(arg, rng.as_mut());
                if raw != val {
                    clamps += 1;
                }
                q[k] = val;
                e[k] = raw - arg;
                let resid = wr[k] - val;
                if resid != 0.0 && k + 1 < n {
                    axpy(resid, &um.row(k)[k + 1..], &mut acc[k + 1..]);
                }
            }
            (clamps, outside)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok((
        out,
        RoundingTrace {
            eta,
            clamp_count: clamps,
            out_of_range: outside,
        },
    ))
}

/// Elementwise rounding with no feedback.
pub fn round_elementwise(w: &Matrix, cfg: &RoundingConfig) -> Result<Matrix> {
    round_with_linear_feedback(w, &FeedbackMatrix::zeros(w.cols()), cfg)
}

/// LDLQ: feedback taken from the LDL factor of `H`.
pub fn ldlq(w: &Matrix, h: &SymmetricPsd, cfg: &RoundingConfig) -> Result<Matrix> {
    Ok(ldlq_traced(w, h, cfg)?.0)
}

pub fn ldlq_traced(
    w: &Matrix,
    h: &SymmetricPsd,
    cfg: &RoundingConfig,
) -> Result<(Matrix, RoundingTrace, LdlFactors)> {
    check_dims(w, h)?;
    let f = ldl_decompose(h)?;
    let (q, trace) = round_with_linear_feedback_traced(w, &FeedbackMatrix::from_ldl(&f), cfg)?;
    Ok((q, trace, f))
}

/// OPTQ-style sequential quantization with inverse-Hessian error propagation.
///
/// Independent of the LDL path: it uses the upper Cholesky factor of `H^{-1}`
/// and propagates each rounding error onto the remaining columns. If `H` is
/// singular the inverse is replaced by an eigendecomposition pseudo-inverse.
pub fn optq_reference(w: &Matrix, h: &SymmetricPsd, cfg: &RoundingConfig) -> Result<Matrix> {
    cfg.validate()?;
    check_dims(w, h)?;
    check_finite(w)?;
    let (m, n) = w.shape();
    let hinv = match spd_inverse(h.matrix()) {
        Some(inv) => inv,
        None => pseudo_inverse(h, 1e-10)?,
    };
    let tol = 1e-14 * hinv.trace().abs().max(f64::MIN_POSITIVE);
    // H^{-1} = C^T C with C upper triangular
    let c = cholesky_lower_semidefinite(&hinv, tol).transpose();
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(n)
        .zip(w.as_slice().par_chunks(n))
        .enumerate()
        .for_each(|(row, (q, wr))| {
            let mut rng = cfg.row_rng(row);
            let mut x = wr.to_vec();
            for t in 0..n {
                let (_, val) = cfg.quantize(x[t], rng.as_mut());
                q[t] = val;
                let ctt = c[(t, t)];
                if ctt > 0.0 && t + 1 < n {
                    let err = (x[t] - val) / ctt;
                    axpy(-err, &c.row(t)[t + 1..], &mut x[t + 1..]);
                }
            }
        });
    Ok(out)
}

/// One coordinate-descent pass over every row, columns in order.
///
/// Each coordinate moves to the rounded, clamped minimizer of the proxy loss
/// with all other coordinates fixed. When `w_init` equals `w` exactly the
/// pass runs in stand-alone mode and always assigns; otherwise a coordinate
/// that is already on the grid only moves if the loss strictly drops.
pub fn greedy_pass(
    w: &Matrix,
    h: &SymmetricPsd,
    cfg: &RoundingConfig,
    w_init: &Matrix,
) -> Result<Matrix> {
    Ok(greedy_pass_counted(w, h, cfg, w_init)?.0)
}

/// [`greedy_pass`] plus the number of coordinates that changed.
pub fn greedy_pass_counted(
    w: &Matrix,
    h: &SymmetricPsd,
    cfg: &RoundingConfig,
    w_init: &Matrix,
) -> Result<(Matrix, usize)> {
    cfg.validate()?;
    check_dims(w, h)?;
    if w_init.shape() != w.shape() {
        return data_err("w_init shape does not match W");
    }
    check_finite(w)?;
    check_finite(w_init)?;
    let hd = checked_diag(h)?;
    let standalone = w_init == w;
    let n = w.cols();
    let mut out = w_init.clone();
    if n == 0 {
        return Ok((out, 0));
    }
    let hm = h.matrix();
    let top = cfg.max_code();
    let changes: usize = out
        .as_mut_slice()
        .par_chunks_mut(n)
        .zip(w.as_slice().par_chunks(n))
        .map(|(q, wr)| {
            let mut resid: Vec<f64> = q.iter().zip(wr).map(|(a, b)| a - b).collect();
            let mut changes = 0;
            for j in 0..n {
                let g = dot(&resid, hm.row(j));
                let z = q[j] - g / hd[j];
                let mut cand = z.round();
                if cfg.clamp {
                    cand = cand.clamp(0.0, top);
                }
                let delta = cand - q[j];
                if delta == 0.0 {
                    continue;
                }
                let on_grid = q[j] == q[j].round() && (!cfg.clamp || (0.0..=top).contains(&q[j]));
                if !standalone && on_grid && hd[j] * delta * delta + 2.0 * delta * g >= 0.0 {
                    continue;
                }
                q[j] = cand;
                resid[j] += delta;
                changes += 1;
            }
            changes
        })
        .sum();
    Ok((out, changes))
}

/// Up to `passes` greedy passes; stops early once a pass changes nothing.
pub fn greedy(
    w: &Matrix,
    h: &SymmetricPsd,
    cfg: &RoundingConfig,
    w_init: &Matrix,
    passes: usize,
) -> Result<Matrix> {
    if passes == 0 {
        return data_err("passes must be at least 1");
    }
    let mut cur = w_init.clone();
    for _ in 0..passes {
        let (next, changes) = greedy_pass_counted(w, h, cfg, &cur)?;
        cur = next;
        if changes == 0 {
            break;
        }
    }
    Ok(cur)
}

/// LDLQ on columns sorted by descending `diag(H)`, then greedy passes in the
/// same order, then the original column order is restored.
pub fn ldlq_rg(
    w: &Matrix,
    h: &SymmetricPsd,
    cfg: &RoundingConfig,
    passes: usize,
) -> Result<Matrix> {
    check_dims(w, h)?;
    let perm = Permutation::sort_descending(&h.matrix().diagonal());
    let wp = perm.permute_cols(w);
    let hp = perm.permute_sym(h);
    let q = ldlq(&wp, &hp, cfg)?;
    let q = if passes > 0 {
        greedy(&wp, &hp, &RoundingConfig { subroutine: Subroutine::Nearest, ..*cfg }, &q, passes)?
    } else {
        q
    };
    Ok(perm.inverse().permute_cols(&q))
}

fn check_dims(w: &Matrix, h: &SymmetricPsd) -> Result<()> {
    if w.cols() != h.n() {
        return data_err(format!(
            "W has {} columns but H is {}x{}",
            w.cols(),
            h.n(),
            h.n()
        ));
    }
    Ok(())
}

fn check_finite(w: &Matrix) -> Result<()> {
    if !w.all_finite() {
        return data_err("weights contain NaN or infinite values");
    }
    Ok(())
}

fn checked_diag(h: &SymmetricPsd) -> Result<Vec<f64>> {
    let d = h.matrix().diagonal();
    if let Some(j) = d.iter().position(|&v| !(v > 0.0)) {
        return data_err(format!("H has non-positive diagonal entry at {j}"));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_examples() {
        assert_eq!(q_near(0.499, 4), 0.0);
        assert_eq!(q_near(17.2, 4), 15.0);
        assert_eq!(q_near(7.5, 4), 8.0);
        assert_eq!(q_near(-0.5, 4), 0.0);
        assert_eq!(q_near(2.5, 4), 3.0);
    }

    #[test]
    fn stoch_examples() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(q_stoch(3.0, 4, &mut rng), 3.0);
            assert_eq!(q_stoch(-0.5, 4, &mut rng), 0.0);
        }
        let trials = 100_000;
        let mean: f64 = (0..trials).map(|_| q_stoch(0.25, 8, &mut rng)).sum::<f64>() / trials as f64;
        assert!((mean - 0.25).abs() < 0.005, "{mean}");
    }

    #[test]
    fn hand_traced_feedback() {
        let w = Matrix::from_rows(&[&[0.4, 0.6]]);
        let u = FeedbackMatrix::new(&Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap();
        let q = round_with_linear_feedback(&w, &u, &RoundingConfig::nearest(4)).unwrap();
        assert_eq!(q.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn lower_part_of_feedback_is_ignored() {
        let w = Matrix::from_rows(&[&[0.4, 0.6, 1.3]]);
        let a = Matrix::from_rows(&[&[0.0, 1.0, 0.2], &[0.0, 0.0, -0.7], &[0.0, 0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[9.0, 1.0, 0.2], &[5.0, 9.0, -0.7], &[1.0, 2.0, 3.0]]);
        let cfg = RoundingConfig::nearest(4);
        let qa = round_with_linear_feedback(&w, &FeedbackMatrix::new(&a).unwrap(), &cfg).unwrap();
        let qb = round_with_linear_feedback(&w, &FeedbackMatrix::new(&b).unwrap(), &cfg).unwrap();
        assert_eq!(qa, qb);
    }

    #[test]
    fn zero_feedback_is_nearest() {
        let w = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.37 - 1.0);
        let q = round_elementwise(&w, &RoundingConfig::nearest(2)).unwrap();
        for (a, b) in q.as_slice().iter().zip(w.as_slice()) {
            assert_eq!(*a, q_near(*b, 2));
        }
    }

    #[test]
    fn diagonal_h_ldlq_and_optq_are_nearest() {
        let w = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 1.7).sin() * 2.0 + 1.5);
        let h = SymmetricPsd::diag(&[2.0, 0.5, 1.0]).unwrap();
        let cfg = RoundingConfig::nearest(2);
        let near = round_elementwise(&w, &cfg).unwrap();
        assert_eq!(ldlq(&w, &h, &cfg).unwrap(), near);
        assert_eq!(optq_reference(&w, &SymmetricPsd::identity(3), &cfg).unwrap(), near);
        assert_eq!(ldlq_rg(&w, &h, &cfg, 0).unwrap(), near);
        assert_eq!(greedy_pass(&w, &h, &cfg, &near).unwrap(), near);
    }

    #[test]
    fn bits_are_validated() {
        let w = Matrix::zeros(1, 1);
        let u = FeedbackMatrix::zeros(1);
        assert!(round_with_linear_feedback(&w, &u, &RoundingConfig::nearest(1)).is_err());
        assert!(round_with_linear_feedback(&w, &u, &RoundingConfig::nearest(17)).is_err());
        assert!(round_with_linear_feedback(&w, &FeedbackMatrix::zeros(2), &RoundingConfig::nearest(2)).is_err());
    }

    #[test]
    fn greedy_needs_positive_diagonal() {
        let h = SymmetricPsd::diag(&[1.0, 0.0]).unwrap();
        let w = Matrix::zeros(1, 2);
        assert!(greedy_pass(&w, &h, &RoundingConfig::nearest(2), &w).is_err());
        assert!(greedy(&w, &SymmetricPsd::identity(2), &RoundingConfig::nearest(2), &w, 0).is_err());
    }
}
