#![allow(dead_code)]

use quip_core::incoherence::damp;
use quip_core::linalg::{generate_lowrank_psd, SpectrumSpec};
use quip_core::{Matrix, SymmetricPsd};

/// Rank-`k` PSD with geometric spectrum `10 * 0.8^i`, Haar eigenvectors.
pub fn lowrank(n: usize, k: usize, seed: u64) -> SymmetricPsd {
    let spec: Vec<f64> = (0..k).map(|i| 10.0 * 0.8f64.powi(i as i32)).collect();
    generate_lowrank_psd(n, &SpectrumSpec::new(spec).unwrap(), seed).unwrap()
}

/// [`lowrank`] plus 1% damping, so it is positive definite.
pub fn lowrank_damped(n: usize, k: usize, seed: u64) -> SymmetricPsd {
    damp(&lowrank(n, k, seed), 0.01).unwrap()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

pub fn rel_fro(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}
