//! Rounding that provably stays on the finite grid.
//!
//! Solves
//!
//! ```text
//! minimize    tr(R H R^T)
//! subject to  R unit upper triangular,  ||R e_j||^2 <= 1 + c  for every j
//! ```
//!
//! and rounds stochastically with feedback `U = R^{-1} - I`, so the rounding
//! error is `eta R` and every column of `R` bounds how far an entry can drift.
//!
//! The solver works on the Lagrange dual. For multipliers `lambda >= 0`, the
//! inner minimizer over unit upper-triangular `R` is `(U_G + I)^{-1}` from the
//! LDL factorization of `G = H + diag(lambda)`, and the dual value is
//! `tr(D_G) - (1 + c) sum(lambda)`. Each iteration proposes a per-column
//! multiplier step from a scalar secular equation, then backtracks until the
//! dual value does not decrease.

use crate::error::{data_err, Error, Result};
use crate::incoherence::{scale_to_grid, transform, IncoherenceMeta};
use crate::linalg::{ldl_decompose, unit_upper_inverse};
use crate::matio::QuantizedLayer;
use crate::matrix::{Matrix, SymmetricPsd};
use crate::rounding::{max_code, round_with_linear_feedback_traced, FeedbackMatrix, RoundingConfig};

/// Solution of the constrained factor problem.
#[derive(Clone, Debug)]
pub struct ConstrainedFactor {
    /// Unit upper-triangular factor.
    pub r: Matrix,
    pub c: f64,
    /// `tr(R H R^T)`.
    pub objective: f64,
    pub solver_iters: usize,
    /// Largest `||R e_j||^2 - 1 - c` seen at the last iterate, before the
    /// final projection onto the feasible set.
    pub residual: f64,
    pub multipliers: Vec<f64>,
}

impl ConstrainedFactor {
    /// Feedback matrix `R^{-1} - I`.
    pub fn feedback(&self) -> Result<FeedbackMatrix> {
        FeedbackMatrix::new(&unit_upper_inverse(&strict_upper(&self.r))?)
    }

    /// Largest `||R e_j||^2 - 1 - c`.
    pub fn max_violation(&self) -> f64 {
        column_excess(&self.r, self.c)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Feasibility tolerance on `||R e_j||^2 - 1 - c`.
    pub tol: f64,
    /// Relative dual-change tolerance.
    pub rel_change: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            rel_change: 1e-10,
            max_iters: 500,
        }
    }
}

fn strict_upper(r: &Matrix) -> Matrix {
    let n = r.rows();
    Matrix::from_fn(n, n, |i, j| if j > i { r[(i, j)] } else { 0.0 })
}

/// `||R e_j||^2 - 1 - c` for each column.
fn column_excess(r: &Matrix, c: f64) -> Vec<f64> {
    let n = r.rows();
    let mut norms = vec![0.0; n];
    for i in 0..n {
        for (j, v) in r.row(i).iter().enumerate() {
            norms[j] += v * v;
        }
    }
    norms.into_iter().map(|s| s - 1.0 - c).collect()
}

struct DualPoint {
    value: f64,
    r: Matrix,
    d: Vec<f64>,
}

fn dual_at(h: &SymmetricPsd, lambda: &[f64], c: f64) -> Result<DualPoint> {
    let mut g = h.matrix().clone();
    for (i, l) in lambda.iter().enumerate() {
        g[(i, i)] += l;
    }
    let f = ldl_decompose(&SymmetricPsd::new(g)?)?;
    let r = unit_upper_inverse(&f.u_strict)?;
    let value = f.trace_d() - (1.0 + c) * lambda.iter().sum::<f64>();
    Ok(DualPoint { value, r, d: f.d })
}

/// Multiplier step for column `j`: solves
/// `sum_i r_i^2 / (1 + t a_i)^2 = c` for `t`, keeping `lambda_j + t >= 0`.
fn column_step(r: &[f64], a: &[f64], c: f64, lambda_j: f64) -> f64 {
    let f = |t: f64| -> f64 {
        r.iter()
            .zip(a)
            .map(|(ri, ai)| {
                let den = 1.0 + t * ai;
                ri * ri / (den * den)
            })
            .sum::<f64>()
            - c
    };
    let amax = a.iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi);
    if f(0.0) > 0.0 {
        lo = 0.0;
        hi = 1.0;
        let mut grow = 0;
        while f(hi) > 0.0 && grow < 200 {
            lo = hi;
            hi *= 2.0;
            grow += 1;
        }
    } else if lambda_j > 0.0 {
        // loosen: move toward the pole of 1 + t a but never past it
        let floor = if amax > 0.0 { -0.9 / amax } else { f64::NEG_INFINITY };
        let lowest = (-lambda_j).max(floor);
        if f(lowest) <= 0.0 {
            return lowest;
        }
        lo = lowest;
        hi = 0.0;
    } else {
        return 0.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the feasible side of the bracket
    hi
}

const STALL_ITERS: usize = 5;
const STALL_VIOLATION: f64 = 1e-4;

/// Minimizes `tr(R H R^T)` over unit upper-triangular `R` with column norms
/// `||R e_j||^2 <= 1 + c`.
pub fn solve_constrained(h: &SymmetricPsd, c: f64, opts: &SolverOptions) -> Result<ConstrainedFactor> {
    if !(c.is_finite() && c > 0.0) {
        return data_err("constraint level c must be positive and finite");
    }
    let n = h.n();
    let mut lambda = vec![0.0; n];
    let mut cur = dual_at(h, &lambda, c)?;
    let d_floor = 1e-300_f64.max(1e-14 * h.trace() / n.max(1) as f64);
    let mut iters = 0;
    let mut last_change = f64::INFINITY;
    let mut violation = column_excess(&cur.r, c).into_iter().fold(0.0, f64::max);
    let mut stalled = 0;

    while !(violation < opts.tol && last_change <= opts.rel_change) {
        // the dual is at its optimum to machine precision; the small primal
        // residual left over is removed by the projection below
        if stalled >= STALL_ITERS && violation <= STALL_VIOLATION * (1.0 + c) {
            break;
        }
        if iters == opts.max_iters {
            return Err(Error::NotConverged {
                iterations: iters,
                violation,
                dual_change: last_change,
            });
        }
        iters += 1;

        // a[i][j] = sum_{k=i+1..j} R_kj^2 / d_k
        let mut step = vec![0.0; n];
        let mut col = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        for j in 1..n {
            col.clear();
            a.clear();
            col.extend((0..j).map(|i| cur.r[(i, j)]));
            a.resize(j, 0.0);
            let mut s = 0.0;
            for i in (0..j).rev() {
                let rk = cur.r[(i + 1, j)];
                s += rk * rk / cur.d[i + 1].max(d_floor);
                a[i] = s;
            }
            step[j] = column_step(&col, &a, c, lambda[j]);
        }

        let mut scale = 1.0;
        let (next, next_lambda) = loop {
            let trial: Vec<f64> = lambda
                .iter()
                .zip(&step)
                .map(|(l, t)| (l + scale * t).max(0.0))
                .collect();
            let p = dual_at(h, &trial, c)?;
            if p.value >= cur.value - 1e-15 * cur.value.abs() || scale < 1e-8 {
                break (p, trial);
            }
            scale *= 0.5;
        };
        last_change = (next.value - cur.value).abs() / cur.value.abs().max(f64::MIN_POSITIVE);
        if last_change <= 1e-14 {
            stalled += 1;
        } else {
            stalled = 0;
        }
        cur = next;
        lambda = next_lambda;
        violation = column_excess(&cur.r, c).into_iter().fold(0.0, f64::max);
    }

    // project columns that still exceed the budget
    let excess = column_excess(&cur.r, c);
    let mut r = cur.r;
    for (j, e) in excess.iter().enumerate() {
        if *e > 0.0 {
            let off = e + c;
            let shrink = (c / off).sqrt();
            for i in 0..j {
                r[(i, j)] *= shrink;
            }
        }
    }
    let objective = {
        let rh = r.matmul(h.matrix())?;
        (0..n).map(|i| crate::matrix::dot(rh.row(i), r.row(i))).sum()
    };
    Ok(ConstrainedFactor {
        r,
        c,
        objective,
        solver_iters: iters,
        residual: violation,
        multipliers: lambda,
    })
}

/// Constraint level `2 / log(4 m n / delta)`.
pub fn constraint_level(m: usize, n: usize, delta: f64) -> f64 {
    2.0 / (4.0 * m as f64 * n as f64 / delta).ln()
}

/// How the rotated weights are mapped onto the grid range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangeScale {
    /// `s = rho ||W||_F / sqrt(mn)`.
    Frobenius { rho: f64 },
    /// `s = max |W_ij|`; no entry is clamped.
    MaxAbs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampSafeOptions {
    pub bits: u32,
    /// Failure probability budget.
    pub delta: f64,
    pub seed: u64,
    pub alpha: f64,
    pub range: RangeScale,
    pub solver: SolverOptions,
}

impl Default for ClampSafeOptions {
    fn default() -> Self {
        ClampSafeOptions {
            bits: 3,
            delta: 0.05,
            seed: 0,
            alpha: 0.01,
            range: RangeScale::Frobenius { rho: 2.4 },
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClampSafeStats {
    pub c: f64,
    /// Quantizer arguments that fell outside `[0, 2^b - 1]`.
    pub out_of_range: usize,
    /// Entries clamped into `[1, 2^b - 2]` before rounding.
    pub range_clamps: usize,
    /// Proxy loss of the de-quantized weights against the damped `H`.
    pub proxy_loss: f64,
    pub objective: f64,
    pub trace_d: f64,
    pub solver_iters: usize,
    pub residual: f64,
}

impl ClampSafeStats {
    pub fn any_out_of_range(&self) -> bool {
        self.out_of_range > 0
    }
}

/// Rotates, maps weights into `[1, 2^b - 2]`, and rounds stochastically with
/// the constrained feedback.
///
/// The map uses `s' = s (2^b - 1) / (2^b - 3)` in the standard affine form,
/// which sends `[-s, s]` onto `[1, 2^b - 2]`; the layer therefore de-quantizes
/// with the usual post-processing.
pub fn quantize_clamp_safe(
    w: &Matrix,
    h: &SymmetricPsd,
    opts: &ClampSafeOptions,
) -> Result<(QuantizedLayer, Matrix, ClampSafeStats)> {
    if !(2..=16).contains(&opts.bits) {
        return data_err(format!("bits must be in 2..=16, got {}", opts.bits));
    }
    if !(opts.delta > 0.0 && opts.delta < 1.0) {
        return data_err("delta must lie in (0, 1)");
    }
    let (m, n) = w.shape();
    let t = transform(w, h, opts.alpha, opts.seed, true, false)?;
    let s = match opts.range {
        RangeScale::Frobenius { rho } => {
            if !(rho.is_finite() && rho > 0.0) {
                return data_err("rho must be positive");
            }
            rho * t.w.frobenius_norm() / ((m * n) as f64).sqrt()
        }
        RangeScale::MaxAbs => t.w.max_abs(),
    };
    let top = max_code(opts.bits);
    let scale = s * top / (top - 2.0);
    let mut grid = t.w;
    scale_to_grid(&mut grid, scale, opts.bits);
    let mut range_clamps = 0;
    for v in grid.as_mut_slice() {
        let cl = v.clamp(1.0, top - 1.0);
        // the extreme entry under MaxAbs lands on the bound up to rounding
        if (cl - *v).abs() > 1e-9 * top {
            range_clamps += 1;
        }
        *v = cl;
    }

    let c = constraint_level(m, n, opts.delta);
    let factor = solve_constrained(&t.h, c, &opts.solver)?;
    let cfg = RoundingConfig::stochastic(opts.bits, opts.seed);
    let (codes, trace) = round_with_linear_feedback_traced(&grid, &factor.feedback()?, &cfg)?;

    let meta = IncoherenceMeta {
        seed: opts.seed,
        bits: opts.bits,
        alpha: opts.alpha,
        scale,
        d_tilde: t.d_tilde,
        u_shapes: t.u_shapes,
        v_shapes: t.v_shapes,
        row_perm: t.row_perm,
        col_perm: t.col_perm,
    };
    let layer = QuantizedLayer::from_grid(&codes, meta)?;
    let w_hat = layer.dequantize()?;
    let stats = ClampSafeStats {
        c,
        out_of_range: trace.out_of_range,
        range_clamps,
        proxy_loss: crate::analysis::proxy_loss(w, &w_hat, &t.h_damped)?,
        objective: factor.objective,
        trace_d: ldl_decompose(&t.h)?.trace_d(),
        solver_iters: factor.solver_iters,
        residual: factor.residual,
    };
    Ok((layer, w_hat, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_identity() {
        for c in [0.01, 0.5, 10.0] {
            let f = solve_constrained(&SymmetricPsd::identity(5), c, &SolverOptions::default()).unwrap();
            assert_eq!(f.r, Matrix::identity(5));
            assert_eq!(f.objective, 5.0);
        }
    }

    #[test]
    fn loose_constraint_recovers_ldl() {
        let h = SymmetricPsd::new(Matrix::from_rows(&[
            &[4.0, 2.0, 1.0],
            &[2.0, 3.0, 0.5],
            &[1.0, 0.5, 2.0],
        ]))
        .unwrap();
        let f = solve_constrained(&h, 1e6, &SolverOptions::default()).unwrap();
        let trd = ldl_decompose(&h).unwrap().trace_d();
        assert!((f.objective - trd).abs() <= 1e-12 * trd);
        assert!(f.multipliers.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn tight_constraint_is_feasible_and_costlier() {
        let h = SymmetricPsd::new(Matrix::from_fn(6, 6, |i, j| if i == j { 2.0 } else { 1.0 })).unwrap();
        let loose = solve_constrained(&h, 1e6, &SolverOptions::default()).unwrap();
        let tight = solve_constrained(&h, 0.05, &SolverOptions::default()).unwrap();
        assert!(tight.max_violation() <= 1e-12);
        assert!(tight.objective >= loose.objective);
        for i in 0..6 {
            assert_eq!(tight.r[(i, i)], 1.0);
        }
    }

    #[test]
    fn rejects_bad_c() {
        assert!(solve_constrained(&SymmetricPsd::identity(2), 0.0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn level_formula() {
        let c = constraint_level(64, 64, 0.05);
        assert!((c - 2.0 / (4.0 * 4096.0 / 0.05f64).ln()).abs() < 1e-15);
    }
}
