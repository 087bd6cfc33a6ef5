//! Incoherence processing and the end-to-end quantization pipeline.
//!
//! Pre-processing damps `H`, rescales columns, applies random permutations and
//! Kronecker-factored Haar rotations on both sides, then maps the weights
//! affinely onto the grid `[0, 2^b - 1]`. Post-processing undoes every step.

use log::warn;

use crate::error::{data_err, Result};
use crate::linalg::{
    factor_pair, ldl_decompose, sym_eig, KroneckerOrthogonal, Permutation, Side,
};
use crate::matio::QuantizedLayer;
use crate::matrix::{Matrix, SymmetricPsd};
use crate::rng::streams;
use crate::rounding::{
    greedy, ldlq_rg, ldlq_traced, max_code, round_elementwise, RoundingConfig, Subroutine,
};

/// Everything needed to invert pre-processing.
#[derive(Clone, Debug, PartialEq)]
pub struct IncoherenceMeta {
    pub seed: u64,
    pub bits: u32,
    pub alpha: f64,
    pub scale: f64,
    pub d_tilde: Vec<f64>,
    /// `(0, 0)` when incoherence is disabled.
    pub u_shapes: (usize, usize),
    pub v_shapes: (usize, usize),
    pub row_perm: Permutation,
    pub col_perm: Permutation,
}

impl IncoherenceMeta {
    pub fn rows(&self) -> usize {
        self.row_perm.len()
    }

    pub fn cols(&self) -> usize {
        self.d_tilde.len()
    }

    pub fn incoherence_enabled(&self) -> bool {
        self.u_shapes != (0, 0)
    }

    /// Left rotation `U`, regenerated from the seed.
    pub fn u_factor(&self) -> Result<Option<KroneckerOrthogonal>> {
        self.factor(self.u_shapes, streams::U_FACTORS)
    }

    /// Right rotation `V`, regenerated from the seed.
    pub fn v_factor(&self) -> Result<Option<KroneckerOrthogonal>> {
        self.factor(self.v_shapes, streams::V_FACTORS)
    }

    fn factor(&self, shapes: (usize, usize), stream: u64) -> Result<Option<KroneckerOrthogonal>> {
        if shapes == (0, 0) {
            return Ok(None);
        }
        KroneckerOrthogonal::sample(shapes.0, shapes.1, self.seed, stream).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.rows(), self.cols());
        if !(2..=16).contains(&self.bits) {
            return data_err(format!("bits must be in 2..=16, got {}", self.bits));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return data_err("scale must be positive and finite");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return data_err("alpha must be non-negative and finite");
        }
        if self.d_tilde.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
            return data_err("diagonal rescaler must be positive and finite");
        }
        if self.col_perm.len() != n {
            return data_err("column permutation length does not match n");
        }
        let enabled = self.incoherence_enabled();
        if enabled != (self.v_shapes != (0, 0)) {
            return data_err("U and V must both be present or both absent");
        }
        if enabled
            && (self.u_shapes.0 * self.u_shapes.1 != m || self.v_shapes.0 * self.v_shapes.1 != n)
        {
            return data_err("Kronecker factor shapes do not multiply to the layer shape");
        }
        if !enabled && !(self.row_perm.is_identity() && self.col_perm.is_identity()) {
            return data_err("permutations must be identity when incoherence is disabled");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub bits: u32,
    pub rho: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Rotations, permutations, and diagonal rescaling. Off gives plain
    /// affine range scaling.
    pub incoherence: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            bits: 2,
            rho: 2.4,
            alpha: 0.01,
            seed: 0,
            incoherence: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    /// Weights on the grid range `[0, 2^b - 1]`.
    pub w: Matrix,
    /// Processed Hessian in the rotated coordinates.
    pub h: SymmetricPsd,
    /// `H + alpha * mean(diag H) * I`, in the original coordinates.
    pub h_damped: SymmetricPsd,
    pub meta: IncoherenceMeta,
    /// Entries pushed back into range by the final clamp.
    pub clamp_count: usize,
    /// Incoherence of the weights right before range scaling.
    pub mu_w: f64,
}

/// `H + alpha * mean(diag H) * I`.
pub fn damp(h: &SymmetricPsd, alpha: f64) -> Result<SymmetricPsd> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return data_err(format!("alpha must be non-negative, got {alpha}"));
    }
    let n = h.n();
    let mut m = h.matrix().clone();
    if n > 0 {
        let shift = alpha * h.trace() / n as f64;
        for i in 0..n {
            m[(i, i)] += shift;
        }
    }
    SymmetricPsd::new(m)
}

/// Output of the rotation stage, before range scaling.
#[derive(Clone, Debug)]
pub(crate) struct Transformed {
    pub w: Matrix,
    pub h: SymmetricPsd,
    pub h_damped: SymmetricPsd,
    pub d_tilde: Vec<f64>,
    pub u_shapes: (usize, usize),
    pub v_shapes: (usize, usize),
    pub row_perm: Permutation,
    pub col_perm: Permutation,
}

/// Damping, optional diagonal rescaling, permutations and rotations.
pub(crate) fn transform(
    w: &Matrix,
    h: &SymmetricPsd,
    alpha: f64,
    seed: u64,
    incoherence: bool,
    rescale: bool,
) -> Result<Transformed> {
    let (m, n) = w.shape();
    if h.n() != n {
        return data_err(format!("W has {n} columns but H is {}x{}", h.n(), h.n()));
    }
    if m == 0 || n == 0 {
        return data_err("empty weight matrix");
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return data_err("alpha must be non-negative");
    }
    if !w.all_finite() {
        return data_err("weights contain NaN or infinite values");
    }
    if w.frobenius_norm() == 0.0 {
        return data_err("weight matrix is identically zero");
    }

    let h_damped = damp(h, alpha)?;
    let hdiag = h_damped.matrix().diagonal();
    if let Some(j) = hdiag.iter().position(|&v| !(v > 0.0)) {
        return data_err(format!("damped H has non-positive diagonal entry at {j}"));
    }

    let mut wk = w.clone();
    let mut hk = h_damped.matrix().clone();
    let mut d_tilde = vec![1.0; n];
    let (mut row_perm, mut col_perm) = (Permutation::identity(m), Permutation::identity(n));
    let (mut u_shapes, mut v_shapes) = ((0, 0), (0, 0));

    if incoherence && rescale {
        let mut col_sq = vec![0.0; n];
        for r in 0..m {
            for (c, v) in w.row(r).iter().enumerate() {
                col_sq[c] += v * v;
            }
        }
        let mean_sq = col_sq.iter().sum::<f64>() / n as f64;
        let zero_cols = col_sq.iter().filter(|&&v| v == 0.0).count();
        if zero_cols > 0 {
            warn!("{zero_cols} weight column(s) are zero; flooring their rescaling denominator");
        }
        for j in 0..n {
            let denom = if col_sq[j] > 0.0 { col_sq[j] } else { 1e-8 * mean_sq };
            d_tilde[j] = (hdiag[j] / denom).powf(0.25);
        }
        for r in 0..m {
            for (v, d) in wk.row_mut(r).iter_mut().zip(&d_tilde) {
                *v *= d;
            }
        }
        for i in 0..n {
            for j in 0..n {
                hk[(i, j)] /= d_tilde[i] * d_tilde[j];
            }
        }
    }
    if incoherence {
        row_perm = Permutation::random(m, seed, streams::ROW_PERM);
        col_perm = Permutation::random(n, seed, streams::COL_PERM);
        wk = col_perm.permute_cols(&row_perm.permute_rows(&wk));
        hk = col_perm.permute_cols(&col_perm.permute_rows(&hk));

        u_shapes = factor_pair(m);
        v_shapes = factor_pair(n);
        let u = KroneckerOrthogonal::sample(u_shapes.0, u_shapes.1, seed, streams::U_FACTORS)?;
        let v = KroneckerOrthogonal::sample(v_shapes.0, v_shapes.1, seed, streams::V_FACTORS)?;
        wk = v.apply(&u.apply(&wk, Side::Left, false)?, Side::Right, true)?;
        hk = v.apply(&v.apply(&hk, Side::Left, false)?, Side::Right, true)?;
    }
    Ok(Transformed {
        w: wk,
        h: SymmetricPsd::from_symmetrized(hk)?,
        h_damped,
        d_tilde,
        u_shapes,
        v_shapes,
        row_perm,
        col_perm,
    })
}

/// `W <- clamp((W / s + 1) / 2 * (2^b - 1), 0, 2^b - 1)` in place; returns
/// the number of clamped entries.
pub(crate) fn scale_to_grid(w: &mut Matrix, scale: f64, bits: u32) -> usize {
    let top = max_code(bits);
    let mut clamp_count = 0;
    for v in w.as_mut_slice() {
        let x = 0.5 * (*v / scale + 1.0) * top;
        let c = x.clamp(0.0, top);
        if c != x {
            clamp_count += 1;
        }
        *v = c;
    }
    clamp_count
}

pub fn preprocess(w: &Matrix, h: &SymmetricPsd, opts: &PreprocessOptions) -> Result<Preprocessed> {
    if !(2..=16).contains(&opts.bits) {
        return data_err(format!("bits must be in 2..=16, got {}", opts.bits));
    }
    if !(opts.rho.is_finite() && opts.rho > 0.0) {
        return data_err("rho must be positive");
    }
    let t = transform(w, h, opts.alpha, opts.seed, opts.incoherence, true)?;
    let (m, n) = w.shape();
    let mut wk = t.w;
    let mu_w = mu_weights(&wk)?;
    let scale = opts.rho * wk.frobenius_norm() / ((m * n) as f64).sqrt();
    let clamp_count = scale_to_grid(&mut wk, scale, opts.bits);

    Ok(Preprocessed {
        w: wk,
        h: t.h,
        h_damped: t.h_damped,
        meta: IncoherenceMeta {
            seed: opts.seed,
            bits: opts.bits,
            alpha: opts.alpha,
            scale,
            d_tilde: t.d_tilde,
            u_shapes: t.u_shapes,
            v_shapes: t.v_shapes,
            row_perm: t.row_perm,
            col_perm: t.col_perm,
        },
        clamp_count,
        mu_w,
    })
}

/// Maps grid values back to the original weight space.
pub fn postprocess(w_hat: &Matrix, meta: &IncoherenceMeta) -> Result<Matrix> {
    meta.validate()?;
    if w_hat.shape() != (meta.rows(), meta.cols()) {
        return data_err(format!(
            "expected {}x{} matrix, got {}x{}",
            meta.rows(),
            meta.cols(),
            w_hat.rows(),
            w_hat.cols()
        ));
    }
    let top = max_code(meta.bits);
    let s = meta.scale;
    let mut wk = w_hat.map(|x| s * ((x / top) * 2.0 - 1.0));
    if let (Some(u), Some(v)) = (meta.u_factor()?, meta.v_factor()?) {
        wk = v.apply(&u.apply(&wk, Side::Left, true)?, Side::Right, false)?;
        wk = meta
            .col_perm
            .inverse()
            .permute_cols(&meta.row_perm.inverse().permute_rows(&wk));
    }
    for r in 0..wk.rows() {
        for (v, d) in wk.row_mut(r).iter_mut().zip(&meta.d_tilde) {
            *v /= d;
        }
    }
    Ok(wk)
}

/// `sqrt(n) * max |Q_ij|` over an eigenvector matrix.
pub fn mu_from_eigenvectors(q: &Matrix) -> f64 {
    (q.rows() as f64).sqrt() * q.max_abs()
}

/// Incoherence of `H` measured from its eigenvectors.
pub fn mu_hessian(h: &SymmetricPsd) -> Result<f64> {
    Ok(mu_from_eigenvectors(&sym_eig(h)?.vectors))
}

/// `max |W_ij| * sqrt(mn) / ||W||_F`.
pub fn mu_weights(w: &Matrix) -> Result<f64> {
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return data_err("incoherence of a zero matrix is undefined");
    }
    Ok(w.max_abs() * ((w.rows() * w.cols()) as f64).sqrt() / norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ldlq,
    LdlqRg,
    Greedy,
    Nearest,
    Stochastic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ldlq => "ldlq",
            Method::LdlqRg => "ldlq_rg",
            Method::Greedy => "greedy",
            Method::Nearest => "near",
            Method::Stochastic => "stoch",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "ldlq" => Method::Ldlq,
            "ldlq_rg" | "ldlq-rg" => Method::LdlqRg,
            "greedy" => Method::Greedy,
            "near" | "nearest" => Method::Nearest,
            "stoch" | "stochastic" => Method::Stochastic,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuipOptions {
    pub bits: u32,
    pub rho: f64,
    pub alpha: f64,
    pub seed: u64,
    pub method: Method,
    /// Scalar quantizer used inside LDLQ.
    pub subroutine: Subroutine,
    pub incoherence: bool,
    /// Greedy passes for `LdlqRg` and `Greedy`.
    pub passes: usize,
    /// Measure `mu_H` of the processed Hessian (one eigendecomposition).
    pub measure_mu: bool,
}

impl Default for QuipOptions {
    fn default() -> Self {
        QuipOptions {
            bits: 2,
            rho: 2.4,
            alpha: 0.01,
            seed: 0,
            method: Method::Ldlq,
            subroutine: Subroutine::Nearest,
            incoherence: true,
            passes: 10,
            measure_mu: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuipReport {
    /// Loss of the de-quantized weights against the damped `H`.
    pub proxy_loss_damped: f64,
    /// Loss against the `H` that was passed in.
    pub proxy_loss_raw: f64,
    /// `tr(D)` and `tr(H)` of the processed Hessian.
    pub trace_d: f64,
    pub trace_h: f64,
    pub mu_h: Option<f64>,
    pub mu_w: f64,
    /// Entries clamped when mapping onto the grid range.
    pub clamp_count: usize,
    /// Entries clamped during rounding.
    pub rounding_clamps: usize,
}

#[derive(Clone, Debug)]
pub struct QuipOutput {
    pub layer: QuantizedLayer,
    pub w_hat: Matrix,
    pub report: QuipReport,
}

/// Pre-process, round with the selected method, post-process.
pub fn quip(w: &Matrix, h: &SymmetricPsd, opts: &QuipOptions) -> Result<QuipOutput> {
    if matches!(opts.method, Method::LdlqRg | Method::Greedy) && opts.passes == 0 {
        return data_err("passes must be at least 1 for greedy methods");
    }
    let pre = preprocess(
        w,
        h,
        &PreprocessOptions {
            bits: opts.bits,
            rho: opts.rho,
            alpha: opts.alpha,
            seed: opts.seed,
            incoherence: opts.incoherence,
        },
    )?;
    let near = RoundingConfig::nearest(opts.bits);
    let cfg = RoundingConfig {
        subroutine: opts.subroutine,
        seed: opts.seed,
        ..near
    };
    let ldl = ldl_decompose(&pre.h)?;
    let mut rounding_clamps = 0;
    let codes = match opts.method {
        Method::Ldlq => {
            let (q, trace, _) = ldlq_traced(&pre.w, &pre.h, &cfg)?;
            rounding_clamps = trace.clamp_count;
            q
        }
        Method::LdlqRg => ldlq_rg(&pre.w, &pre.h, &cfg, opts.passes)?,
        Method::Greedy => greedy(&pre.w, &pre.h, &near, &pre.w, opts.passes)?,
        Method::Nearest => round_elementwise(&pre.w, &near)?,
        Method::Stochastic => round_elementwise(
            &pre.w,
            &RoundingConfig::stochastic(opts.bits, opts.seed),
        )?,
    };
    let w_hat = postprocess(&codes, &pre.meta)?;
    let layer = QuantizedLayer::from_grid(&codes, pre.meta)?;
    let mu_h = if opts.measure_mu {
        Some(mu_hessian(&pre.h)?)
    } else {
        None
    };
    let report = QuipReport {
        proxy_loss_damped: crate::analysis::proxy_loss(w, &w_hat, &pre.h_damped)?,
        proxy_loss_raw: crate::analysis::proxy_loss(w, &w_hat, h)?,
        trace_d: ldl.trace_d(),
        trace_h: pre.h.trace(),
        mu_h,
        mu_w: pre.mu_w,
        clamp_count: pre.clamp_count,
        rounding_clamps,
    };
    Ok(QuipOutput {
        layer,
        w_hat,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_weights_examples() {
        assert!((mu_weights(&Matrix::from_fn(3, 4, |_, _| 2.5)).unwrap() - 1.0).abs() < 1e-15);
        let mut onehot = Matrix::zeros(4, 9);
        onehot[(2, 5)] = -3.0;
        assert!((mu_weights(&onehot).unwrap() - 6.0).abs() < 1e-15);
        assert!(mu_weights(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mu_hessian_identity_and_scaling() {
        let n = 16;
        assert!((mu_hessian(&SymmetricPsd::identity(n)).unwrap() - 4.0).abs() < 1e-12);
        let h = SymmetricPsd::new(Matrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.5 })).unwrap();
        let h2 = SymmetricPsd::new(h.matrix().scale(2.0)).unwrap();
        assert!((mu_hessian(&h).unwrap() - mu_hessian(&h2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn disabled_incoherence_is_affine() {
        let w = Matrix::from_fn(4, 6, |i, j| ((i * 6 + j) as f64).sin());
        let h = SymmetricPsd::identity(6);
        let opts = PreprocessOptions {
            bits: 8,
            alpha: 0.0,
            incoherence: false,
            ..Default::default()
        };
        let pre = preprocess(&w, &h, &opts).unwrap();
        assert!(!pre.meta.incoherence_enabled());
        assert_eq!(pre.meta.d_tilde, vec![1.0; 6]);
        assert_eq!(pre.clamp_count, 0);
        let s = 2.4 * w.frobenius_norm() / 24f64.sqrt();
        assert_eq!(pre.meta.scale, s);
        let back = postprocess(&pre.w, &pre.meta).unwrap();
        assert!(back.sub(&w).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_options() {
        let w = Matrix::identity(2);
        let h = SymmetricPsd::identity(2);
        for opts in [
            PreprocessOptions { alpha: -0.1, ..Default::default() },
            PreprocessOptions { rho: 0.0, ..Default::default() },
            PreprocessOptions { bits: 1, ..Default::default() },
        ] {
            assert!(preprocess(&w, &h, &opts).is_err());
        }
        assert!(preprocess(&Matrix::zeros(2, 2), &h, &Default::default()).is_err());
        assert!(preprocess(&Matrix::zeros(2, 3), &h, &Default::default()).is_err());
    }

    #[test]
    fn damping_shift() {
        let h = SymmetricPsd::diag(&[1.0, 3.0]).unwrap();
        let d = damp(&h, 0.5).unwrap();
        assert_eq!(d.matrix().diagonal(), vec![2.0, 4.0]);
    }
}
