//! Loss evaluation, Monte Carlo estimators, adversarial constructions and
//! Hessian statistics.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{data_err, Result};
use crate::incoherence::{mu_from_eigenvectors, QuipOptions, QuipOutput};
use crate::linalg::{ldl_decompose, sym_eig, sym_eigvals, unit_upper_inverse, SymEig};
use crate::matrix::{dot, Matrix, SymmetricPsd};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::rounding::{
    round_with_linear_feedback, FeedbackMatrix, RoundingConfig, Subroutine,
};

/// `tr((W_hat - W) H (W_hat - W)^T)`.
pub fn proxy_loss(w: &Matrix, w_hat: &Matrix, h: &SymmetricPsd) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return data_err("W and W_hat shapes differ");
    }
    if w.cols() != h.n() {
        return data_err(format!("W has {} columns but H is {}x{}", w.cols(), h.n(), h.n()));
    }
    let n = w.cols();
    if n == 0 {
        return Ok(0.0);
    }
    let hm = h.matrix();
    let per_row: Vec<f64> = w
        .as_slice()
        .par_chunks(n)
        .zip(w_hat.as_slice().par_chunks(n))
        .map(|(a, b)| {
            let delta: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
            (0..n).map(|i| delta[i] * dot(hm.row(i), &delta)).sum()
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// Rounding schemes compared by the estimators. All round onto the full
/// integer lattice (no clamp).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorMethod {
    Nearest,
    Stochastic,
    Ldlq(Subroutine),
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let t = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / t;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (t - 1.0);
        Estimate {
            mean,
            stderr: (var / t).sqrt(),
            trials: xs.len(),
        }
    }

    /// `|mean - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }

    /// `(mean - target) / stderr`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.stderr
    }
}

fn feedback_for(method: EstimatorMethod, h: &SymmetricPsd) -> Result<(FeedbackMatrix, Subroutine)> {
    Ok(match method {
        EstimatorMethod::Nearest => (FeedbackMatrix::zeros(h.n()), Subroutine::Nearest),
        EstimatorMethod::Stochastic => (FeedbackMatrix::zeros(h.n()), Subroutine::Stochastic),
        EstimatorMethod::Ldlq(s) => (FeedbackMatrix::from_ldl(&ldl_decompose(h)?), s),
    })
}

fn run_trials(
    trials: usize,
    h: &SymmetricPsd,
    u: &FeedbackMatrix,
    sub: Subroutine,
    seed: u64,
    weights: impl Fn(usize) -> Matrix + Sync,
) -> Result<Estimate> {
    let losses: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let w = weights(t);
            let cfg = RoundingConfig {
                bits: 16,
                subroutine: sub,
                seed: derive_seed(seed, t as u64),
                clamp: false,
            };
            let q = round_with_linear_feedback(&w, u, &cfg)?;
            proxy_loss(&w, &q, h)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&losses))
}

/// Average proxy loss over `W ~ Unif[0,1]^{m x n}`, integer-lattice rounding.
pub fn estimate_avg_loss(
    method: EstimatorMethod,
    h: &SymmetricPsd,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Estimate> {
    if trials < 100 {
        return data_err("at least 100 trials are required");
    }
    let n = h.n();
    let (u, sub) = feedback_for(method, h)?;
    run_trials(trials, h, &u, sub, seed, |t| {
        let mut rng = stream_rng(seed, streams::TRIALS + t as u64);
        Matrix::from_fn(m, n, |_, _| rng.random::<f64>())
    })
}

/// i.i.d. entries `0.5 - eps` or `0.5 + eps`, each with probability 1/2.
pub fn worst_case_weights(m: usize, n: usize, eps: f64, seed: u64) -> Result<Matrix> {
    if !(eps > 0.0 && eps < 0.5) {
        return data_err("eps must lie in (0, 0.5)");
    }
    let mut rng = stream_rng(seed, streams::WORST_CASE);
    Ok(Matrix::from_fn(m, n, |_, _| {
        if rng.random::<bool>() {
            0.5 + eps
        } else {
            0.5 - eps
        }
    }))
}

/// Weights whose nearest-rounding arguments under feedback `U` are exactly
/// `target`: `W = Q(target) - eta (U + I)^{-1}` with `eta = Q(target) - target`.
pub fn adversarial_weights(target: &Matrix, u: &FeedbackMatrix) -> Result<Matrix> {
    if target.cols() != u.n() {
        return data_err("target width does not match feedback size");
    }
    let q = target.map(f64::round);
    let eta = q.sub(target)?;
    let inv = unit_upper_inverse(u.matrix())?;
    q.sub(&eta.matmul(&inv)?)
}

/// Average stochastic-rounding loss on fresh `worst_case_weights` draws.
pub fn estimate_worst_case_stochastic(
    h: &SymmetricPsd,
    m: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<Estimate> {
    if trials < 2 {
        return data_err("at least 2 trials are required");
    }
    worst_case_weights(1, 1, eps, 0)?;
    let n = h.n();
    run_trials(trials, h, &FeedbackMatrix::zeros(n), Subroutine::Stochastic, seed, |t| {
        worst_case_weights(m, n, eps, derive_seed(seed, t as u64)).expect("eps checked")
    })
}

/// LDLQ-nearest loss on weights built so every quantizer argument is
/// `0.5 +- eps`. Returns `(loss, (m/4)(1 - 2 eps)^2 tr(D))`.
pub fn worst_case_ldlq_loss(h: &SymmetricPsd, m: usize, eps: f64, seed: u64) -> Result<(f64, f64)> {
    let f = ldl_decompose(h)?;
    let u = FeedbackMatrix::from_ldl(&f);
    let target = worst_case_weights(m, h.n(), eps, seed)?;
    let w = adversarial_weights(&target, &u)?;
    let q = round_with_linear_feedback(&w, &u, &RoundingConfig::nearest(16).unclamped())?;
    let expected = m as f64 / 4.0 * (1.0 - 2.0 * eps).powi(2) * f.trace_d();
    Ok((proxy_loss(&w, &q, h)?, expected))
}

/// Finite-grid instance on which clamped LDLQ loses to nearest rounding.
/// `W` is `d x n` with columns alternating 0.499 and 0.501.
pub fn make_counterexample(n: usize, d: usize, c: f64) -> Result<(Matrix, SymmetricPsd)> {
    if n < 3 {
        return data_err("counterexample needs n >= 3");
    }
    let mut h = Matrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { 1.0 });
    h[(n - 1, n - 1)] = 1.0;
    for j in 1..n - 1 {
        h[(0, j)] += 2.0 * c;
        h[(j, 0)] += 2.0 * c;
    }
    h[(0, n - 1)] += c;
    h[(n - 1, 0)] += c;
    h[(0, 0)] += 4.0 * c + n as f64 * c * c;
    let h = SymmetricPsd::new(h)?;
    h.validate_psd()?;
    let w = Matrix::from_fn(d, n, |_, j| 0.499 + 0.002 * (j % 2) as f64);
    Ok((w, h))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianStats {
    pub n: usize,
    /// Fraction of eigenvalues above `1e-10 * lambda_max`.
    pub frac_rank_abs: f64,
    /// Fraction of eigenvalues above `0.01 * lambda_max`.
    pub frac_rank_approx: f64,
    pub trace_d: f64,
    pub trace_h: f64,
    /// `tr(D) / tr(H)`.
    pub trace_ratio: f64,
}

pub fn hessian_stats(h: &SymmetricPsd) -> Result<HessianStats> {
    let n = h.n();
    if n == 0 {
        return data_err("empty Hessian");
    }
    let ev = sym_eigvals(h)?;
    let lmax = ev[0].max(0.0);
    let frac = |t: f64| ev.iter().filter(|&&v| v > t * lmax).count() as f64 / n as f64;
    let trace_d = ldl_decompose(h)?.trace_d();
    let trace_h = h.trace();
    Ok(HessianStats {
        n,
        frac_rank_abs: if lmax > 0.0 { frac(1e-10) } else { 0.0 },
        frac_rank_approx: if lmax > 0.0 { frac(0.01) } else { 0.0 },
        trace_d,
        trace_h,
        trace_ratio: if trace_h > 0.0 { trace_d / trace_h } else { 1.0 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceAudit {
    /// `tr(D)`.
    pub lhs: f64,
    /// `(mu^2 / n) tr(H^{1/2})^2`.
    pub rhs: f64,
    pub mu: f64,
    pub trace_sqrt: f64,
    pub holds: bool,
}

/// `(mu^2 / n) * tr_sqrt^2`.
pub fn trace_bound_rhs(mu: f64, n: usize, tr_sqrt: f64) -> f64 {
    mu * mu / n as f64 * tr_sqrt * tr_sqrt
}

/// Checks `tr(D) <= (mu^2/n) tr(H^{1/2})^2` with `mu` measured from the
/// eigenvectors. A relative slack of `1e-9` absorbs rounding at equality.
pub fn audit_trace_bound(h: &SymmetricPsd) -> Result<TraceAudit> {
    audit_trace_bound_with(h, &sym_eig(h)?)
}

/// [`audit_trace_bound`] reusing an existing eigendecomposition of `h`.
pub fn audit_trace_bound_with(h: &SymmetricPsd, eig: &SymEig) -> Result<TraceAudit> {
    let n = h.n();
    let lhs = ldl_decompose(h)?.trace_d();
    let mu = mu_from_eigenvectors(&eig.vectors);
    let trace_sqrt: f64 = eig.values.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let rhs = trace_bound_rhs(mu, n, trace_sqrt);
    Ok(TraceAudit {
        lhs,
        rhs,
        mu,
        trace_sqrt,
        holds: lhs <= rhs * (1.0 + 1e-9),
    })
}

/// Key/value report rows, rendered as `key=value` lines, an aligned table, or
/// a two-line TSV.
pub trait Report {
    fn fields(&self) -> Vec<(&'static str, String)>;

    fn to_kv(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn to_table(&self) -> String {
        let fields = self.fields();
        let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        fields
            .iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }

    fn to_tsv(&self) -> String {
        let fields = self.fields();
        let keys: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join("\t"), vals.join("\t"))
    }
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub proxy_loss: f64,
    pub proxy_loss_raw: f64,
    pub trace_d: f64,
    pub trace_h: f64,
    pub mu_h: Option<f64>,
    pub mu_w: f64,
    pub clamp_count: usize,
    pub rounding_clamps: usize,
    pub method: String,
    pub bits: u32,
    pub seed: u64,
}

impl LossReport {
    pub fn from_quip(out: &QuipOutput, opts: &QuipOptions) -> Self {
        let r = &out.report;
        LossReport {
            proxy_loss: r.proxy_loss_damped,
            proxy_loss_raw: r.proxy_loss_raw,
            trace_d: r.trace_d,
            trace_h: r.trace_h,
            mu_h: r.mu_h,
            mu_w: r.mu_w,
            clamp_count: r.clamp_count,
            rounding_clamps: r.rounding_clamps,
            method: opts.method.name().to_string(),
            bits: opts.bits,
            seed: opts.seed,
        }
    }
}

impl Report for LossReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("method", self.method.clone()),
            ("bits", self.bits.to_string()),
            ("seed", self.seed.to_string()),
            ("proxy_loss", num(self.proxy_loss)),
            ("proxy_loss_raw", num(self.proxy_loss_raw)),
            ("trace_d", num(self.trace_d)),
            ("trace_h", num(self.trace_h)),
            ("mu_h", self.mu_h.map(num).unwrap_or_else(|| "na".into())),
            ("mu_w", num(self.mu_w)),
            ("clamp_count", self.clamp_count.to_string()),
            ("rounding_clamps", self.rounding_clamps.to_string()),
        ]
    }
}

impl Report for HessianStats {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("frac_rank_abs", num(self.frac_rank_abs)),
            ("frac_rank_approx", num(self.frac_rank_approx)),
            ("trace_d", num(self.trace_d)),
            ("trace_h", num(self.trace_h)),
            ("trace_ratio", num(self.trace_ratio)),
        ]
    }
}
