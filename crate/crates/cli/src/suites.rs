//! Synthetic verification suites behind `quip verify`.
//!
//! Every check is deterministic for a fixed base seed. `Size::Quick` shrinks
//! trial counts and dimensions for smoke runs; `Size::Full` uses the sizes the
//! release checks are defined at.

use std::fmt;

use quip_core::analysis::{
    audit_trace_bound, estimate_avg_loss, estimate_worst_case_stochastic, make_counterexample,
    proxy_loss, worst_case_ldlq_loss, Estimate, EstimatorMethod,
};
use quip_core::clamp_safe::{quantize_clamp_safe, solve_constrained, ClampSafeOptions, SolverOptions};
use quip_core::incoherence::{mu_hessian, preprocess, quip, PreprocessOptions, QuipOptions};
use quip_core::linalg::{
    gaussian_matrix, generate_lowrank_psd, geometric_spectrum, ldl_decompose, uniform_matrix,
    SpectrumSpec,
};
use quip_core::matio::{decode_matrix, decode_quantized, encode_matrix, encode_quantized};
use quip_core::rng::{derive_seed, streams};
use quip_core::rounding::{greedy_pass, ldlq, optq_reference, round_elementwise, RoundingConfig, Subroutine};
use quip_core::{Matrix, Result, SymmetricPsd};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Size {
    Quick,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivalence,
    Losses,
    WorstCase,
    TraceBound,
    Diagonal,
    Incoherence,
    Counterexample,
    Greedy,
    ClampSafe,
    RoundTrip,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 11] = [
        Suite::Equivalence,
        Suite::Losses,
        Suite::WorstCase,
        Suite::TraceBound,
        Suite::Diagonal,
        Suite::Incoherence,
        Suite::Counterexample,
        Suite::Greedy,
        Suite::ClampSafe,
        Suite::RoundTrip,
        Suite::Determinism,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Losses => "losses",
            Suite::WorstCase => "worst-case",
            Suite::TraceBound => "trace-bound",
            Suite::Diagonal => "diagonal",
            Suite::Incoherence => "incoherence",
            Suite::Counterexample => "counterexample",
            Suite::Greedy => "greedy",
            Suite::ClampSafe => "clamp-safe",
            Suite::RoundTrip => "roundtrip",
            Suite::Determinism => "determinism",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn run(&self, size: Size, seed: u64) -> Result<Vec<Check>> {
        match self {
            Suite::Equivalence => equivalence(size, seed),
            Suite::Losses => losses(size, seed),
            Suite::WorstCase => worst_case(size, seed),
            Suite::TraceBound => trace_bound(size, seed),
            Suite::Diagonal => diagonal(size, seed),
            Suite::Incoherence => incoherence(size, seed),
            Suite::Counterexample => counterexample(),
            Suite::Greedy => greedy_descent(size, seed),
            Suite::ClampSafe => clamp_safe(size, seed),
            Suite::RoundTrip => round_trip(size, seed),
            Suite::Determinism => determinism(seed),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One PASS/FAIL line.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn status(&self) -> &'static str {
        if self.passed {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

fn pick(size: Size, quick: usize, full: usize) -> usize {
    match size {
        Size::Quick => quick,
        Size::Full => full,
    }
}

fn lowrank(n: usize, k: usize, seed: u64) -> Result<SymmetricPsd> {
    generate_lowrank_psd(n, &SpectrumSpec::new(geometric_spectrum(k, 10.0, 0.9))?, seed)
}

fn damped_lowrank(n: usize, k: usize, seed: u64) -> Result<SymmetricPsd> {
    quip_core::incoherence::damp(&lowrank(n, k, seed)?, 0.01)
}

fn estimate_line(name: &str, e: &Estimate, target: f64) -> Check {
    Check::new(
        name,
        e.within(target, 3.0),
        format!(
            "mean={:.6e} target={:.6e} se={:.3e} z={:+.2} trials={}",
            e.mean,
            target,
            e.stderr,
            e.z_score(target),
            e.trials
        ),
    )
}

fn equivalence(size: Size, seed: u64) -> Result<Vec<Check>> {
    let cfg = RoundingConfig::nearest(4);
    let count = pick(size, 10, 50);
    let max_dim = pick(size, 64, 256);
    let mut mismatched = 0;
    for i in 0..count {
        let s = derive_seed(seed, i as u64);
        let n = 1 + (i * 97 + 13) % max_dim;
        let m = 1 + (i * 61 + 7) % max_dim;
        let k = 1 + (i * 31) % n;
        let h = damped_lowrank(n, k, s)?;
        let w = uniform_matrix(m, n, 0.0, 1.0, s, streams::SYNTHETIC);
        if ldlq(&w, &h, &cfg)? != optq_reference(&w, &h, &cfg)? {
            mismatched += 1;
        }
    }
    let mut out = vec![Check::new(
        "ldlq-equals-optq/seeded",
        mismatched == 0,
        format!("{mismatched}/{count} instances differ, dims <= {max_dim}"),
    )];

    let big = pick(size, 200, 1000);
    let s = derive_seed(seed, 1 << 20);
    let h = damped_lowrank(big, big / 4, s)?;
    let w = uniform_matrix(big, big, 0.0, 1.0, s, streams::SYNTHETIC);
    let a = ldlq(&w, &h, &cfg)?;
    let b = optq_reference(&w, &h, &cfg)?;
    let diff = a.as_slice().iter().zip(b.as_slice()).filter(|(x, y)| x != y).count();
    out.push(Check::new(
        format!("ldlq-equals-optq/{big}x{big}"),
        diff == 0,
        format!("{diff} codes differ"),
    ));
    Ok(out)
}

fn losses(size: Size, seed: u64) -> Result<Vec<Check>> {
    let (n, m) = (64, 16);
    let trials = pick(size, 300, 2000);
    let h = lowrank(n, 16, seed)?;
    let trd = ldl_decompose(&h)?.trace_d();
    let trh = h.trace();
    let mf = m as f64;
    let cases = [
        ("nearest", EstimatorMethod::Nearest, mf / 12.0 * trh),
        ("stochastic", EstimatorMethod::Stochastic, mf / 6.0 * trh),
        ("ldlq-nearest", EstimatorMethod::Ldlq(Subroutine::Nearest), mf / 12.0 * trd),
        ("ldlq-stochastic", EstimatorMethod::Ldlq(Subroutine::Stochastic), mf / 6.0 * trd),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, method, target))| {
            let e = estimate_avg_loss(*method, &h, m, trials, derive_seed(seed, i as u64 + 1))?;
            Ok(estimate_line(&format!("avg-loss/{name}"), &e, *target))
        })
        .collect()
}

fn worst_case(size: Size, seed: u64) -> Result<Vec<Check>> {
    let (n, m, eps) = (64, 16, 1e-3);
    let h = lowrank(n, 16, seed)?;
    let trd = ldl_decompose(&h)?.trace_d();
    let (loss, expected) = worst_case_ldlq_loss(&h, m, eps, seed)?;
    let rel = (loss - expected).abs() / expected;
    let mut out = vec![Check::new(
        "worst-case/ldlq",
        rel <= 1e-9,
        format!(
            "loss={loss:.9e} (m/4)(1-2eps)^2 tr(D)={expected:.9e} rel={rel:.1e} (m/4)tr(D)={:.9e}",
            m as f64 / 4.0 * trd
        ),
    )];
    let trials = pick(size, 300, 2000);
    let e = estimate_worst_case_stochastic(&h, m, eps, trials, seed)?;
    out.push(estimate_line("worst-case/stochastic", &e, m as f64 / 4.0 * h.trace()));
    Ok(out)
}

fn trace_bound(size: Size, seed: u64) -> Result<Vec<Check>> {
    let dims: &[usize] = match size {
        Size::Quick => &[64, 128],
        Size::Full => &[64, 256, 1024],
    };
    let count = pick(size, 20, 100);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for i in 0..count {
        let n = dims[i % dims.len()];
        let ranks = [1, n / 16, n / 4, n];
        let k = ranks[(i / dims.len()) % ranks.len()];
        let h = lowrank(n, k, derive_seed(seed, i as u64))?;
        let a = audit_trace_bound(&h)?;
        worst = worst.max(a.lhs / a.rhs);
        if !a.holds {
            violations += 1;
        }
    }
    Ok(vec![Check::new(
        "trace-bound/random-psd",
        violations == 0,
        format!("{violations}/{count} violations, max lhs/rhs={worst:.4}"),
    )])
}

fn diagonal(size: Size, seed: u64) -> Result<Vec<Check>> {
    let n = 64;
    let spec: Vec<f64> = {
        let u = uniform_matrix(1, n, 0.1, 10.0, seed, streams::SYNTHETIC);
        u.as_slice().to_vec()
    };
    let h = SymmetricPsd::diag(&spec)?;
    let trials = pick(size, 200, 2000);
    let a = estimate_avg_loss(EstimatorMethod::Ldlq(Subroutine::Nearest), &h, 16, trials, seed)?;
    let b = estimate_avg_loss(EstimatorMethod::Nearest, &h, 16, trials, seed)?;
    // same weight draws on both sides, so compare the paired difference
    let diff = a.mean - b.mean;
    let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
    Ok(vec![Check::new(
        "diagonal/ldlq-equals-nearest",
        diff.abs() <= 3.0 * se,
        format!("diff={diff:.3e} se={se:.3e} ldlq={:.6e} nearest={:.6e}", a.mean, b.mean),
    )])
}

fn incoherence(size: Size, seed: u64) -> Result<Vec<Check>> {
    let n = pick(size, 256, 1024);
    let seeds = pick(size, 10, 100);
    let need = (seeds * 99).div_ceil(100);
    let spec = uniform_matrix(1, n, 1.0, 2.0, seed, streams::SYNTHETIC);
    let h = SymmetricPsd::diag(spec.as_slice())?;
    let w = gaussian_matrix(16, n, 1.0, seed, streams::SYNTHETIC);
    let mut ok = 0;
    let mut mus = Vec::with_capacity(seeds);
    for i in 0..seeds {
        let opts = PreprocessOptions {
            seed: derive_seed(seed, i as u64),
            ..Default::default()
        };
        let mu = mu_hessian(&preprocess(&w, &h, &opts)?.h)?;
        if mu <= 10.0 {
            ok += 1;
        }
        mus.push(mu);
    }
    mus.sort_by(f64::total_cmp);
    Ok(vec![Check::new(
        format!("incoherence/mu-h-n{n}"),
        ok >= need,
        format!(
            "{ok}/{seeds} seeds with mu_H <= 10 (need {need}); before={:.1} median={:.2} max={:.2}",
            (n as f64).sqrt(),
            mus[seeds / 2],
            mus[seeds - 1]
        ),
    )])
}

fn counterexample() -> Result<Vec<Check>> {
    let cfg = RoundingConfig::nearest(4);
    let mut ratios = Vec::new();
    for n in [16, 64, 256] {
        let (w, h) = make_counterexample(n, 16, 0.01)?;
        let a = proxy_loss(&w, &ldlq(&w, &h, &cfg)?, &h)?;
        let b = proxy_loss(&w, &round_elementwise(&w, &cfg)?, &h)?;
        ratios.push(a / b);
    }
    let pass = ratios[0] > 1.0 && ratios.windows(2).all(|r| r[1] > r[0]);
    Ok(vec![Check::new(
        "counterexample/ldlq-over-nearest",
        pass,
        format!(
            "ratios n=16,64,256: {:.2}, {:.2}, {:.2}",
            ratios[0], ratios[1], ratios[2]
        ),
    )])
}

fn greedy_descent(size: Size, seed: u64) -> Result<Vec<Check>> {
    let count = pick(size, 10, 50);
    let cfg = RoundingConfig::nearest(2);
    let mut violations = 0;
    for i in 0..count {
        let s = derive_seed(seed, i as u64);
        let n = 16 + (i * 13) % 49;
        let h = damped_lowrank(n, 1 + n / 4, s)?;
        let w = uniform_matrix(16, n, 0.0, 3.0, s, streams::SYNTHETIC);
        let mut q = ldlq(&w, &h, &cfg)?;
        let mut prev = proxy_loss(&w, &q, &h)?;
        for _ in 0..10 {
            q = greedy_pass(&w, &h, &cfg, &q)?;
            let cur = proxy_loss(&w, &q, &h)?;
            if cur > prev {
                violations += 1;
            }
            prev = cur;
        }
    }
    Ok(vec![Check::new(
        "greedy/monotone-descent",
        violations == 0,
        format!("{violations} increases over {count} instances x 10 passes"),
    )])
}

fn clamp_safe(size: Size, seed: u64) -> Result<Vec<Check>> {
    let n = 64;
    let trials = pick(size, 40, 200);
    let delta = 0.05;
    let h = lowrank(n, 16, seed)?;
    let mut bad = 0;
    for t in 0..trials {
        let s = derive_seed(seed, t as u64);
        let w = gaussian_matrix(n, n, 1.0, s, streams::SYNTHETIC);
        let opts = ClampSafeOptions {
            bits: 3,
            delta,
            seed: s,
            ..Default::default()
        };
        if quantize_clamp_safe(&w, &h, &opts)?.2.any_out_of_range() {
            bad += 1;
        }
    }
    let frac = bad as f64 / trials as f64;
    let limit = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
    let mut out = vec![Check::new(
        "clamp-safe/out-of-range-rate",
        frac <= limit,
        format!("{bad}/{trials} trials out of range, frac={frac:.3} limit={limit:.3}"),
    )];

    let hd = damped_lowrank(n, 16, seed)?;
    let f = solve_constrained(&hd, 1e6, &SolverOptions::default())?;
    let trd = ldl_decompose(&hd)?.trace_d();
    let rel = (f.objective - trd).abs() / trd;
    out.push(Check::new(
        "clamp-safe/loose-constraint-matches-ldl",
        rel <= 1e-6,
        format!("objective={:.9e} tr(D)={trd:.9e} rel={rel:.1e}", f.objective),
    ));
    Ok(out)
}

/// Range multiplier wide enough that the b=16 grid does not clip.
const FINE_GRID_RHO: f64 = 6.0;

fn round_trip(size: Size, seed: u64) -> Result<Vec<Check>> {
    let n = pick(size, 64, 256);
    let count = pick(size, 2, 3);
    let mut worst = 0.0f64;
    let mut worst_default = 0.0f64;
    let mut bit_exact = true;
    for i in 0..count {
        let s = derive_seed(seed, i as u64);
        let w = gaussian_matrix(n, n, 1.0, s, streams::SYNTHETIC);
        let h = lowrank(n, n / 4, s)?;
        let opts = QuipOptions {
            bits: 16,
            rho: FINE_GRID_RHO,
            seed: s,
            measure_mu: false,
            ..Default::default()
        };
        let out = quip(&w, &h, &opts)?;
        let bytes = encode_quantized(&out.layer);
        let layer = decode_quantized(&bytes)?;
        bit_exact &= layer == out.layer && encode_quantized(&layer) == bytes;
        let w_hat = layer.dequantize()?;
        bit_exact &= same_bits(&w_hat, &out.w_hat);
        bit_exact &= same_bits(&decode_matrix(&encode_matrix(&w_hat))?, &w_hat);
        worst = worst.max(rel_err(&w_hat, &w)?);

        let dflt = quip(&w, &h, &QuipOptions { rho: 2.4, ..opts })?;
        worst_default = worst_default.max(rel_err(&dflt.w_hat, &w)?);
    }
    Ok(vec![
        Check::new(
            format!("roundtrip/b16-{n}x{n}"),
            worst <= 1e-3,
            format!("max rel err={worst:.3e} at rho={FINE_GRID_RHO} (rho=2.4 gives {worst_default:.3e})"),
        ),
        Check::new(
            "roundtrip/serialization-bit-exact",
            bit_exact,
            "QZ and QMAT encode/decode",
        ),
    ])
}

fn determinism(seed: u64) -> Result<Vec<Check>> {
    let w = gaussian_matrix(48, 96, 1.0, seed, streams::SYNTHETIC);
    let h = lowrank(96, 24, seed)?;
    let opts = QuipOptions {
        seed,
        subroutine: Subroutine::Stochastic,
        ..Default::default()
    };
    let mut outputs = Vec::new();
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| quip_core::Error::Numerical(e.to_string()))?;
        outputs.push(pool.install(|| quip(&w, &h, &opts).map(|o| encode_quantized(&o.layer)))?);
    }
    let same = outputs.windows(2).all(|p| p[0] == p[1]);
    Ok(vec![Check::new(
        "determinism/thread-invariant-qz",
        same,
        format!("{} bytes, threads 1,2,4", outputs[0].len()),
    )])
}

fn same_bits(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn rel_err(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm())
}
