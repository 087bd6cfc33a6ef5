mod common;

use quip_core::analysis::*;
use quip_core::linalg::{gaussian_matrix, ldl_decompose, uniform_matrix, SpectrumSpec, generate_lowrank_psd};
use quip_core::rng::streams;
use quip_core::rounding::{ldlq, round_elementwise, RoundingConfig, Subroutine};
use quip_core::{Matrix, SymmetricPsd};

use common::lowrank;

#[test]
fn proxy_loss_examples() {
    let w = Matrix::from_rows(&[&[1.0, 2.0]]);
    let q = Matrix::from_rows(&[&[2.0, 2.0]]);
    let h = SymmetricPsd::new(Matrix::from_rows(&[&[3.0, 1.0], &[1.0, 2.0]])).unwrap();
    assert_eq!(proxy_loss(&w, &q, &h).unwrap(), 3.0);
    assert_eq!(proxy_loss(&w, &w, &h).unwrap(), 0.0);
    assert!(proxy_loss(&w, &Matrix::zeros(2, 2), &h).is_err());
}

#[test]
fn average_losses_match_closed_forms() {
    let h = lowrank(32, 8, 1);
    let f = ldl_decompose(&h).unwrap();
    let (m, trials) = (8, 600);
    let cases = [
        (EstimatorMethod::Nearest, m as f64 / 12.0 * h.trace()),
        (EstimatorMethod::Stochastic, m as f64 / 6.0 * h.trace()),
        (EstimatorMethod::Ldlq(Subroutine::Nearest), m as f64 / 12.0 * f.trace_d()),
        (EstimatorMethod::Ldlq(Subroutine::Stochastic), m as f64 / 6.0 * f.trace_d()),
    ];
    for (i, (method, target)) in cases.into_iter().enumerate() {
        let e = estimate_avg_loss(method, &h, m, trials, 100 + i as u64).unwrap();
        assert!(e.within(target, 3.0), "{method:?}: z = {}", e.z_score(target));
    }
    assert!(estimate_avg_loss(EstimatorMethod::Nearest, &h, m, 99, 0).is_err());
}

#[test]
fn worst_case_constructions() {
    let h = lowrank(24, 6, 2);
    let f = ldl_decompose(&h).unwrap();
    let (loss, expected) = worst_case_ldlq_loss(&h, 10, 1e-3, 4).unwrap();
    assert!((loss - expected).abs() <= 1e-9 * expected);
    assert!((expected - 2.5 * (1.0 - 2e-3f64).powi(2) * f.trace_d()).abs() <= 1e-12 * expected);
    let e = estimate_worst_case_stochastic(&h, 10, 1e-3, 500, 4).unwrap();
    let target = 10.0 * (0.25 - 1e-6) * h.trace();
    assert!(e.within(target, 3.0), "z = {}", e.z_score(target));
    let w = worst_case_weights(50, 50, 0.1, 1).unwrap();
    assert!(w.as_slice().iter().all(|&v| v == 0.4 || v == 0.6));
    assert!(worst_case_weights(2, 2, 0.5, 1).is_err());
}

#[test]
fn diagonal_hessian_equalizes_ldlq_and_nearest() {
    let h = SymmetricPsd::diag(&[0.3, 2.0, 1.1, 5.0, 0.7, 1.9]).unwrap();
    let w = uniform_matrix(40, 6, 0.0, 3.0, 1, streams::SYNTHETIC);
    let cfg = RoundingConfig::nearest(2);
    assert_eq!(ldlq(&w, &h, &cfg).unwrap(), round_elementwise(&w, &cfg).unwrap());
    let a = estimate_avg_loss(EstimatorMethod::Ldlq(Subroutine::Nearest), &h, 4, 200, 9).unwrap();
    let b = estimate_avg_loss(EstimatorMethod::Nearest, &h, 4, 200, 9).unwrap();
    assert_eq!(a, b);
}

fn counterexample_ratio(n: usize, c: f64) -> f64 {
    let (w, h) = make_counterexample(n, 16, c).unwrap();
    let cfg = RoundingConfig::nearest(4);
    let a = proxy_loss(&w, &ldlq(&w, &h, &cfg).unwrap(), &h).unwrap();
    let b = proxy_loss(&w, &round_elementwise(&w, &cfg).unwrap(), &h).unwrap();
    a / b
}

#[test]
fn counterexample_grows_with_n() {
    let r: Vec<f64> = [16, 64, 256].iter().map(|&n| counterexample_ratio(n, 0.01)).collect();
    assert!(r[0] > 1.0 && r[1] > r[0] && r[2] > r[1], "{r:?}");
    assert!((r[0] - 10.6).abs() < 0.5, "{r:?}");
    assert!(make_counterexample(2, 4, 0.01).is_err());
}

#[test]
fn counterexample_without_perturbation() {
    // c = 0: both rounders land on the same order of loss
    let r = counterexample_ratio(64, 0.0);
    assert!(r > 0.0 && r < 2.0, "ratio {r}");
}

#[test]
fn hessian_stats_examples() {
    let s = hessian_stats(&SymmetricPsd::identity(8)).unwrap();
    assert_eq!(s.frac_rank_abs, 1.0);
    assert_eq!(s.trace_ratio, 1.0);
    let h = generate_lowrank_psd(256, &SpectrumSpec::new(vec![1.0; 4]).unwrap(), 3).unwrap();
    let s = hessian_stats(&h).unwrap();
    assert_eq!(s.frac_rank_abs, 4.0 / 256.0);
    let s = hessian_stats(&lowrank(40, 20, 5)).unwrap();
    assert!(s.trace_ratio < 1.0);
    assert!(hessian_stats(&SymmetricPsd::identity(0)).is_err());
}

#[test]
fn trace_audit_examples() {
    let n = 16;
    let a = audit_trace_bound(&SymmetricPsd::identity(n)).unwrap();
    assert!((a.lhs - n as f64).abs() < 1e-12);
    assert!((a.rhs - (n * n) as f64).abs() < 1e-9);
    assert!((trace_bound_rhs(1.0, n, n as f64) - n as f64).abs() < 1e-12);
    let d = SymmetricPsd::diag(&[1.0, 4.0, 9.0, 0.25]).unwrap();
    assert!(audit_trace_bound(&d).unwrap().holds);
    for seed in 0..20 {
        let k = [1, 4, 16, 64][seed as usize % 4];
        let a = audit_trace_bound(&lowrank(64, k, seed)).unwrap();
        assert!(a.holds, "seed {seed}: {} > {}", a.lhs, a.rhs);
    }
}

#[test]
fn adversarial_weights_pin_quantizer_arguments() {
    let h = lowrank(12, 4, 7);
    let f = ldl_decompose(&h).unwrap();
    let u = quip_core::rounding::FeedbackMatrix::from_ldl(&f);
    let target = worst_case_weights(3, 12, 0.01, 2).unwrap();
    let w = adversarial_weights(&target, &u).unwrap();
    let cfg = RoundingConfig::nearest(16).unclamped();
    let (q, trace) = quip_core::rounding::round_with_linear_feedback_traced(&w, &u, &cfg).unwrap();
    let args = q.sub(&trace.eta).unwrap();
    assert!(args.sub(&target).unwrap().max_abs() < 1e-9);
}

#[test]
fn report_formats() {
    let w = gaussian_matrix(4, 8, 1.0, 1, streams::SYNTHETIC);
    let opts = quip_core::incoherence::QuipOptions::default();
    let out = quip_core::incoherence::quip(&w, &SymmetricPsd::identity(8), &opts).unwrap();
    let r = LossReport::from_quip(&out, &opts);
    let kv = r.to_kv();
    assert!(kv.contains("method=ldlq\n"));
    assert!(kv.lines().all(|l| l.contains('=')));
    let tsv = r.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split('\t').count(), lines[1].split('\t').count());
    assert_eq!(r.to_table().lines().count(), r.fields().len());
}

#[test]
fn estimate_statistics() {
    let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(e.mean, 2.5);
    assert!((e.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
    assert!(e.within(2.5, 0.0));
}
