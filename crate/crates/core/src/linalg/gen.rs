use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{data_err, Result};
use crate::linalg::haar::haar_from_rng;
use crate::matrix::{Matrix, SymmetricPsd};
use crate::rng::{stream_rng, streams};

/// Non-negative eigenvalues in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSpec(Vec<f64>);

impl SpectrumSpec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return data_err("spectrum entries must be finite and non-negative");
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return data_err("spectrum must be sorted in descending order");
        }
        Ok(SpectrumSpec(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `H = Q diag(spectrum) Q^T` with `Q` the first `k = spectrum.len()` columns
/// of a Haar orthogonal `n x n` matrix.
pub fn generate_lowrank_psd(n: usize, spectrum: &SpectrumSpec, seed: u64) -> Result<SymmetricPsd> {
    let spectrum = spectrum.values();
    let k = spectrum.len();
    if k > n {
        return data_err(format!("rank {k} exceeds dimension {n}"));
    }
    let q = haar_from_rng(n, k, &mut stream_rng(seed, streams::SYNTHETIC));
    // B^T = diag(sqrt(lambda)) Q^T, H = B B^T = gram(B^T)
    let bt = Matrix::from_fn(k, n, |i, r| spectrum[i].sqrt() * q[(r, i)]);
    SymmetricPsd::new(bt.gram())
}

/// Geometric spectrum `top, top*ratio, top*ratio^2, ...` of length `k`.
pub fn geometric_spectrum(k: usize, top: f64, ratio: f64) -> Vec<f64> {
    (0..k).map(|i| top * ratio.powi(i as i32)).collect()
}

/// i.i.d. uniform entries on `[lo, hi)`.
pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64, stream: u64) -> Matrix {
    let mut rng = stream_rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// i.i.d. standard normal entries scaled by `sigma`.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, seed: u64, stream: u64) -> Matrix {
    let mut rng = stream_rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigvals;

    #[test]
    fn lowrank_has_requested_spectrum() {
        let spec = [5.0, 2.0, 0.5];
        let h = generate_lowrank_psd(10, &SpectrumSpec::new(spec.to_vec()).unwrap(), 1).unwrap();
        let ev = sym_eigvals(&h).unwrap();
        for (i, &v) in ev.iter().enumerate() {
            let want = spec.get(i).copied().unwrap_or(0.0);
            assert!((v - want).abs() < 1e-12, "{i}: {v} vs {want}");
        }
        assert!((h.trace() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_spectrum() {
        let three = SpectrumSpec::new(vec![1.0; 3]).unwrap();
        assert!(generate_lowrank_psd(2, &three, 0).is_err());
        assert!(SpectrumSpec::new(vec![-1.0]).is_err());
        assert!(SpectrumSpec::new(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn geometric() {
        assert_eq!(geometric_spectrum(3, 4.0, 0.5), vec![4.0, 2.0, 1.0]);
    }
}
