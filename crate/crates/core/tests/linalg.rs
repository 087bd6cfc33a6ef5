mod common;

use proptest::prelude::*;
use quip_core::linalg::*;
use quip_core::rng::{stream_rng, streams};
use quip_core::{Matrix, SymmetricPsd};

use common::{lowrank, max_abs_diff, rel_fro};

fn random_psd(n: usize, rank: usize, seed: u64) -> SymmetricPsd {
    let x = gaussian_matrix(rank, n, 1.0, seed, streams::SYNTHETIC);
    SymmetricPsd::new(x.gram()).unwrap()
}

#[test]
fn ldl_reconstructs_random_psd() {
    for (n, rank, seed) in [(8, 8, 1), (20, 5, 2), (64, 64, 3), (50, 1, 4)] {
        let h = random_psd(n, rank, seed);
        let f = ldl_decompose(&h).unwrap();
        let hn = h.matrix().frobenius_norm();
        assert!(f.reconstruct().sub(h.matrix()).unwrap().frobenius_norm() <= 1e-8 * hn);
        for i in 0..n {
            for j in 0..=i {
                assert_eq!(f.u_strict[(i, j)], 0.0);
            }
        }
        assert!(f.d.iter().all(|&d| d >= 0.0));
    }
}

#[test]
fn trace_d_strictly_below_trace_h_for_generated() {
    for seed in 0..10 {
        let h = lowrank(32, 8, seed);
        let f = ldl_decompose(&h).unwrap();
        assert!(f.trace_d() < h.trace(), "seed {seed}");
    }
    let d = SymmetricPsd::diag(&[1.0, 4.0, 0.5]).unwrap();
    assert_eq!(ldl_decompose(&d).unwrap().trace_d(), d.trace());
}

#[test]
fn eigensolvers_agree_on_random_psd() {
    let h = random_psd(40, 40, 9);
    let ql = sym_eig(&h).unwrap();
    let jac = sym_eig_jacobi(&h).unwrap();
    let hn = h.matrix().frobenius_norm();
    for (a, b) in ql.values.iter().zip(&jac.values) {
        assert!((a - b).abs() <= 1e-10 * hn);
    }
    for e in [&ql, &jac] {
        assert!(e.reconstruct().sub(h.matrix()).unwrap().frobenius_norm() <= 1e-8 * hn);
        assert!(orthogonality_error(&e.vectors) <= 1e-10);
    }
    // eigenvectors agree up to sign for a simple spectrum
    for c in 0..40 {
        let a = ql.vectors.col(c);
        let b = jac.vectors.col(c);
        let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((s.abs() - 1.0).abs() < 1e-8, "column {c}");
    }
}

#[test]
fn psd_sqrt_multiplies_back() {
    let h = random_psd(30, 12, 4);
    let r = psd_sqrt(&h).unwrap();
    let sq = r.matrix().matmul(r.matrix()).unwrap();
    assert!(sq.sub(h.matrix()).unwrap().frobenius_norm() <= 1e-7 * h.matrix().frobenius_norm());
}

#[test]
fn haar_first_entry_second_moment() {
    // E[Q_00^2] = 1/p for Haar Q
    let p = 64;
    let samples = 1000;
    let xs: Vec<f64> = (0..samples)
        .map(|s| sample_haar_orthogonal(p, s).unwrap()[(0, 0)].powi(2))
        .collect();
    let mean = xs.iter().sum::<f64>() / samples as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples as f64 - 1.0);
    let se = (var / samples as f64).sqrt();
    assert!((mean - 1.0 / p as f64).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn haar_orthogonality_tolerance() {
    for p in [2, 17, 64, 100] {
        let q = sample_haar_orthogonal(p, 5).unwrap();
        assert!(orthogonality_error(&q) <= 1e-10 * p as f64);
    }
}

#[test]
fn kron_matches_dense_for_all_small_dims() {
    for n in 1..=64 {
        let (p1, p2) = factor_pair(n);
        assert_eq!(p1 * p2, n);
        let k = KroneckerOrthogonal::sample(p1, p2, n as u64, streams::U_FACTORS).unwrap();
        let d = k.dense();
        let x = gaussian_matrix(3, n, 1.0, n as u64, streams::SYNTHETIC);
        let y = k.apply(&x, Side::Right, false).unwrap();
        assert!(rel_fro(&y, &x.matmul(&d).unwrap()) <= 1e-10, "n = {n}");
        let xt = x.transpose();
        let z = k.apply(&xt, Side::Left, false).unwrap();
        assert!(rel_fro(&z, &d.matmul(&xt).unwrap()) <= 1e-10, "n = {n}");
        let back = k.apply(&y, Side::Right, true).unwrap();
        assert!(max_abs_diff(&back, &x) <= 1e-10, "n = {n}");
    }
}

#[test]
fn kron_identity_and_two_by_two() {
    let x = gaussian_matrix(4, 6, 1.0, 1, streams::SYNTHETIC);
    let id = KroneckerOrthogonal::new(Matrix::identity(2), Matrix::identity(3)).unwrap();
    assert_eq!(id.apply(&x, Side::Right, false).unwrap(), x);
    // explicit Kronecker product for 2x2 factors
    let l = Matrix::from_rows(&[&[0.6, -0.8], &[0.8, 0.6]]);
    let r = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let k = KroneckerOrthogonal::new(l.clone(), r.clone()).unwrap();
    let mut dense = Matrix::zeros(4, 4);
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                for d in 0..2 {
                    dense[(2 * a + c, 2 * b + d)] = l[(a, b)] * r[(c, d)];
                }
            }
        }
    }
    let v = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
    let got = k.apply(&v, Side::Left, false).unwrap();
    assert!(max_abs_diff(&got, &dense.matmul(&v).unwrap()) < 1e-15);
}

#[test]
fn permutations_basic() {
    assert!(Permutation::random(1, 3, 0).is_identity());
    assert_eq!(Permutation::random(50, 3, 0), Permutation::random(50, 3, 0));
    assert_ne!(Permutation::random(50, 3, 0), Permutation::random(50, 4, 0));
}

#[test]
fn lowrank_generator_examples() {
    let h = generate_lowrank_psd(16, &SpectrumSpec::new(vec![1.0; 16]).unwrap(), 2).unwrap();
    assert!(max_abs_diff(h.matrix(), &Matrix::identity(16)) < 1e-10);
    let h = generate_lowrank_psd(16, &SpectrumSpec::new(vec![5.0]).unwrap(), 2).unwrap();
    assert!((h.trace() - 5.0).abs() < 1e-12);
    let ev = sym_eigvals(&h).unwrap();
    assert!(ev[1..].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn thin_haar_is_orthonormal() {
    let q = haar_from_rng(100, 10, &mut stream_rng(1, 2));
    assert!(orthogonality_error(&q) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ldl_invariants(n in 1usize..24, rank in 1usize..24, seed in any::<u64>()) {
        let h = random_psd(n, rank.min(n), seed);
        let f = ldl_decompose(&h).unwrap();
        let hn = h.matrix().frobenius_norm();
        prop_assert!(f.reconstruct().sub(h.matrix()).unwrap().frobenius_norm() <= 1e-8 * hn.max(1e-300));
        prop_assert!(f.trace_d() <= h.trace() * (1.0 + 1e-12));
    }

    #[test]
    fn eig_reconstructs(n in 1usize..20, seed in any::<u64>()) {
        let h = random_psd(n, n, seed);
        let e = sym_eig(&h).unwrap();
        let hn = h.matrix().frobenius_norm();
        prop_assert!(e.reconstruct().sub(h.matrix()).unwrap().frobenius_norm() <= 1e-8 * hn);
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn permutation_roundtrip(n in 1usize..200, seed in any::<u64>()) {
        let p = Permutation::random(n, seed, streams::PERMUTATION);
        let x: Vec<u32> = (0..n as u32).collect();
        prop_assert_eq!(p.inverse().apply(&p.apply(&x)), x);
    }

    #[test]
    fn kron_roundtrip(p1 in 1usize..9, p2 in 1usize..9, seed in any::<u64>()) {
        let k = KroneckerOrthogonal::sample(p1, p2, seed, 0).unwrap();
        let x = gaussian_matrix(p1 * p2, 3, 1.0, seed, streams::SYNTHETIC);
        let y = k.apply(&k.apply(&x, Side::Left, false).unwrap(), Side::Left, true).unwrap();
        prop_assert!(max_abs_diff(&y, &x) <= 1e-10);
    }
}
