//! The `Psi_k` family
//!
//! `Psi_k = Delta^{1/2} sum_n (-sigma/2)^{n-k} a_n / Gamma(n - k + 1)`,
//!
//! with `A Psi_k = (d/2 - 1 - k) Psi_{k+1}` and
//! `K(tau) = (4 pi tau)^{-d/2} sum_k tau^k Psi_k`. Every sum here is finite:
//! `Psi_k` stops at `n = N` and `k` runs over a window `[k_min, k_max]`.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{HeatError, Result};
use crate::geometry::{metric_pack, LaplaceProblem};
use crate::linalg::{self, CMat};
use crate::quad::{self, QuadOptions};
use crate::sdw::{self, apply_a_stencil, ClosedFormSource, TwoPointSource};
use crate::special::{falling, factorial, pochhammer, recip_gamma};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiValue {
    pub k: i32,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub truncation: usize,
    #[serde(with = "linalg::serde_cmat")]
    pub value: CMat,
    /// Norm of the last included term.
    pub tail_estimate: f64,
}

impl PsiValue {
    pub fn check_truncation(&self) -> Result<()> {
        let norm = linalg::frobenius(&self.value);
        if self.tail_estimate > 1e-3 * norm {
            return Err(HeatError::TruncationWarning { tail: self.tail_estimate, norm });
        }
        Ok(())
    }
}

/// Indices `n` whose reciprocal-Gamma weight is non-zero. Terms below
/// `max(0, k)` have `1/Gamma` at a pole and are never evaluated.
pub fn surviving_terms(k: i32, n: usize) -> RangeInclusive<usize> {
    let start = k.max(0) as usize;
    start..=n
}

/// `sigma`, `Delta` and `a_0 .. a_N` at one point, from which every
/// `Psi_k` with truncation `N` follows without further two-point work.
pub struct PsiRow {
    pub sigma: f64,
    pub delta: f64,
    pub coeffs: Vec<CMat>,
    m: usize,
}

impl PsiRow {
    pub fn new(src: &dyn TwoPointSource, x: &[f64], n: usize) -> Result<Self> {
        Ok(PsiRow {
            sigma: src.sigma(x)?,
            delta: src.van_vleck(x)?,
            coeffs: src.coefficients(x, n)?,
            m: src.problem().fiber_dim,
        })
    }

    pub fn truncation(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// `Psi_k` and the norm of its last term.
    pub fn psi(&self, k: i32) -> (CMat, f64) {
        let root = self.delta.sqrt();
        let mut value = linalg::zeros(self.m);
        let mut tail = 0.0;
        for n in surviving_terms(k, self.truncation()) {
            let e = n as i32 - k;
            let w = root * (-0.5 * self.sigma).powi(e) * recip_gamma((e + 1) as f64);
            let term = &self.coeffs[n] * linalg::c(w);
            tail = linalg::frobenius(&term);
            value += term;
        }
        (value, tail)
    }
}

/// `Psi_k(x, y)` truncated at `n = N`, without the truncation guard.
pub fn psi_value(src: &dyn TwoPointSource, k: i32, x: &[f64], n: usize) -> Result<PsiValue> {
    let (value, tail_estimate) = PsiRow::new(src, x, n)?.psi(k);
    Ok(PsiValue { k, x: x.to_vec(), y: src.base().to_vec(), truncation: n, value, tail_estimate })
}

/// `Psi_k(x, y)`; fails with `TruncationWarning` when the last term exceeds
/// `1e-3` of the value.
pub fn psi(problem: &LaplaceProblem, k: i32, x: &[f64], y: &[f64], n: usize) -> Result<PsiValue> {
    let src = sdw::two_point_source(problem, x, y)?;
    let v = psi_value(src.as_ref(), k, x, n)?;
    v.check_truncation()?;
    Ok(v)
}

/// `|| A Psi_k - (d/2 - 1 - k) Psi_{k+1} ||_F` at `x`.
pub fn check_psi_recursion(src: &dyn TwoPointSource, k: i32, x: &[f64], n: usize) -> Result<f64> {
    let p = src.problem();
    let lhs = apply_a_stencil(p, x, src.stencil_width(), p.settings.richardson_stencil, |z| {
        Ok(PsiRow::new(src, z, n)?.psi(k).0)
    })?;
    let factor = 0.5 * p.dim as f64 - 1.0 - k as f64;
    let rhs = PsiRow::new(src, x, n)?.psi(k + 1).0 * linalg::c(factor);
    Ok(linalg::frobenius_distance(&lhs, &rhs))
}

fn heat_prefactor(dim: usize, tau: f64) -> f64 {
    (4.0 * PI * tau).powf(-0.5 * dim as f64)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(HeatError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// `(4 pi tau)^{-d/2} sum_{k = k_min}^{k_max} tau^k Psi_k` with every `Psi_k`
/// truncated at `N = max(k_max, 0)`.
pub fn kernel_from_psi(src: &dyn TwoPointSource, x: &[f64], tau: f64, k_min: i32, k_max: i32) -> Result<CMat> {
    check_tau(tau)?;
    let row = PsiRow::new(src, x, k_max.max(0) as usize)?;
    Ok(psi_window(&row, src.problem().dim, tau, k_min, k_max))
}

fn psi_window(row: &PsiRow, dim: usize, tau: f64, k_min: i32, k_max: i32) -> CMat {
    let mut sum = linalg::zeros(row.m);
    for k in k_min..=k_max {
        sum += row.psi(k).0 * linalg::c(tau.powi(k));
    }
    sum * linalg::c(heat_prefactor(dim, tau))
}

/// The same finite array as [`kernel_from_psi`], summed in the order of the
/// short-time expansion:
/// `Delta^{1/2} (4 pi tau)^{-d/2} sum_n tau^n a_n sum_j (-sigma/2tau)^j / j!`
/// over `n <= N` and `k_min <= n - j <= k_max`.
pub fn kernel_direct(src: &dyn TwoPointSource, x: &[f64], tau: f64, k_min: i32, k_max: i32) -> Result<CMat> {
    check_tau(tau)?;
    let n_max = k_max.max(0) as usize;
    let row = PsiRow::new(src, x, n_max)?;
    let z = -0.5 * row.sigma / tau;
    let mut sum = linalg::zeros(row.m);
    for (n, a) in row.coeffs.iter().enumerate() {
        let n = n as i32;
        let lo = (n - k_max).max(0);
        let hi = n - k_min;
        let mut series = 0.0;
        for j in lo..=hi {
            series += z.powi(j) / factorial(j as u32);
        }
        sum += a * linalg::c(tau.powi(n) * series);
    }
    Ok(sum * linalg::c(row.delta.sqrt() * heat_prefactor(src.problem().dim, tau)))
}

/// Short-time expansion with the exact exponential,
/// `Delta^{1/2} (4 pi tau)^{-d/2} e^{-sigma/2tau} sum_{n <= order} tau^n a_n`.
pub fn kernel_expansion(src: &dyn TwoPointSource, x: &[f64], tau: f64, order: usize) -> Result<CMat> {
    check_tau(tau)?;
    let sigma = src.sigma(x)?;
    let delta = src.van_vleck(x)?;
    let coeffs = src.coefficients(x, order)?;
    let mut sum = linalg::zeros(src.problem().fiber_dim);
    for (n, a) in coeffs.iter().enumerate() {
        sum += a * linalg::c(tau.powi(n as i32));
    }
    let scale = delta.sqrt() * heat_prefactor(src.problem().dim, tau) * (-0.5 * sigma / tau).exp();
    Ok(sum * linalg::c(scale))
}

fn half_dim(problem: &LaplaceProblem) -> Result<i32> {
    if problem.dim % 2 != 0 {
        return Err(HeatError::OddDimension { dim: problem.dim });
    }
    Ok((problem.dim / 2) as i32)
}

fn split_from_row(row: &PsiRow, dim: usize, tau: f64, n: usize) -> (CMat, CMat) {
    let h = (dim / 2) as i32;
    let pre = (4.0 * PI).powf(-0.5 * dim as f64);
    let mut minus = linalg::zeros(row.m);
    let mut plus = linalg::zeros(row.m);
    for k in 0..=n as i32 {
        minus += row.psi(h - 1 - k).0 * linalg::c(pre * tau.powi(-1 - k));
        plus += row.psi(h + k).0 * linalg::c(pre * tau.powi(k));
    }
    (minus, plus)
}

/// Even-dimensional split `(K_-, K_+)` with `K_- = (4 pi)^{-d/2} sum_k
/// Psi_{d/2-1-k} / tau^{1+k}` and `K_+ = (4 pi)^{-d/2} sum_k tau^k Psi_{d/2+k}`,
/// `k = 0 .. N`, each `Psi` truncated at `d/2 + N`. Their sum is
/// [`kernel_from_psi`] over `[d/2 - 1 - N, d/2 + N]`.
pub fn kernel_split(src: &dyn TwoPointSource, x: &[f64], tau: f64, n: usize) -> Result<(CMat, CMat)> {
    let h = half_dim(src.problem())?;
    check_tau(tau)?;
    let row = PsiRow::new(src, x, h as usize + n)?;
    Ok(split_from_row(&row, src.problem().dim, tau, n))
}

/// `(||(d_tau + A) K_-||_F, ||(d_tau + A) K_+||_F)`, with `d_tau` a
/// fourth-order central difference of step `dtau` and `A` the operator
/// stencil in `x`.
pub fn split_heat_residual(src: &dyn TwoPointSource, x: &[f64], tau: f64, n: usize, dtau: f64) -> Result<(f64, f64)> {
    let h = half_dim(src.problem())?;
    check_tau(tau)?;
    if !(dtau > 0.0 && dtau < 0.5 * tau) {
        return Err(HeatError::InvalidArgument(format!("tau step {dtau} must lie in (0, tau/2)")));
    }
    let p = src.problem();
    let trunc = h as usize + n;
    let row = PsiRow::new(src, x, trunc)?;
    let offsets = [-2.0, -1.0, 1.0, 2.0];
    let weights = [1.0, -8.0, 8.0, -1.0];
    let mut dt_minus = linalg::zeros(row.m);
    let mut dt_plus = linalg::zeros(row.m);
    for (o, w) in offsets.iter().zip(weights) {
        let (km, kp) = split_from_row(&row, p.dim, tau + o * dtau, n);
        let scale = linalg::c(w / (12.0 * dtau));
        dt_minus += km * scale;
        dt_plus += kp * scale;
    }
    let width = src.stencil_width();
    let rich = p.settings.richardson_stencil;
    let a_minus = apply_a_stencil(p, x, width, rich, |z| Ok(split_from_row(&PsiRow::new(src, z, trunc)?, p.dim, tau, n).0))?;
    let a_plus = apply_a_stencil(p, x, width, rich, |z| Ok(split_from_row(&PsiRow::new(src, z, trunc)?, p.dim, tau, n).1))?;
    Ok((linalg::frobenius(&(dt_minus + a_minus)), linalg::frobenius(&(dt_plus + a_plus))))
}

/// `(4 pi)^{-d/2} sum_k (k - d/2)^{(j)} tau^{k - d/2 - j} Psi_k`, the `j`-th
/// `tau`-derivative of the windowed kernel (falling factorial powers).
fn tau_derivative(row: &PsiRow, dim: usize, tau: f64, k_min: i32, k_max: i32, j: u32) -> CMat {
    let half = 0.5 * dim as f64;
    let pre = (4.0 * PI).powf(-half);
    let mut sum = linalg::zeros(row.m);
    for k in k_min..=k_max {
        let power = k as f64 - half;
        let w = pre * falling(power, j) * tau.powf(power - j as f64);
        sum += row.psi(k).0 * linalg::c(w);
    }
    sum
}

/// `|| sum_{j <= N_taylor} s^j/j! d_tau^j K(tau) - K(tau + s) ||_F` for the
/// windowed kernel `k in [k_min, k_max]`.
pub fn shift_check(
    src: &dyn TwoPointSource,
    x: &[f64],
    tau: f64,
    s: f64,
    n_taylor: u32,
    k_min: i32,
    k_max: i32,
) -> Result<f64> {
    check_tau(tau)?;
    if !(s.abs() < tau) {
        return Err(HeatError::InvalidArgument(format!("shift {s} must satisfy |s| < tau = {tau}")));
    }
    let row = PsiRow::new(src, x, k_max.max(0) as usize)?;
    let dim = src.problem().dim;
    let mut taylor = tau_derivative(&row, dim, tau, k_min, k_max, 0);
    for j in 1..=n_taylor {
        let w = s.powi(j as i32) / factorial(j);
        taylor += tau_derivative(&row, dim, tau, k_min, k_max, j) * linalg::c(w);
    }
    let shifted = tau_derivative(&row, dim, tau + s, k_min, k_max, 0);
    Ok(linalg::frobenius_distance(&taylor, &shifted))
}

/// `tau^{-k} sum_{n <= N} Gamma(k + n) / (Gamma(k) n!) (-s/tau)^n`, a partial
/// sum of `(tau + s)^{-k}`. The Gamma ratio is the rising factorial, so
/// `k = 0` keeps only `n = 0`.
pub fn binomial_partial_sum(k: f64, s: f64, tau: f64, n: u32) -> f64 {
    let r = -s / tau;
    let mut sum = 0.0;
    for i in 0..=n {
        sum += pochhammer(k, i) / factorial(i) * r.powi(i as i32);
    }
    tau.powf(-k) * sum
}

/// Least-squares ratio `exp(slope)` of `ln |partial_N - (tau + s)^{-k}|`
/// against `N` over `ns`. Residuals below `1e-13 |(tau + s)^{-k}|` are
/// rounding, not truncation, and stay out of the fit.
pub fn binomial_convergence_ratio(k: f64, s: f64, tau: f64, ns: &[u32]) -> f64 {
    let exact = (tau + s).powf(-k);
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .map(|&n| (n as f64, (binomial_partial_sum(k, s, tau, n) - exact).abs()))
        .filter(|&(_, r)| r > 1e-13 * exact.abs())
        .map(|(n, r)| (n, r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let count = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / count;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / count;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxy / sxx).exp()
}

/// `|| int sqrt(g(z)) K(x, z; eps) f(z) dz - f(x) 1 ||_F` on `[lower, upper]`
/// for `d = 1`, with `K` the short-time expansion to `order`.
pub fn delta_regularization_check<F>(
    problem: &LaplaceProblem,
    x: f64,
    eps: f64,
    order: usize,
    test_fn: F,
    lower: f64,
    upper: f64,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if problem.dim != 1 {
        return Err(HeatError::DimensionMismatch { expected: 1, found: problem.dim });
    }
    check_tau(eps)?;
    let m = problem.fiber_dim;
    let kernel = |z: f64| -> Result<CMat> {
        let src: Box<dyn TwoPointSource> = if ClosedFormSource::applies(problem) {
            Box::new(ClosedFormSource::new(problem, &[x], &[z])?)
        } else {
            sdw::two_point_source(problem, &[x], &[z])?
        };
        let k = kernel_expansion(src.as_ref(), &[x], eps, order)?;
        Ok(k * linalg::c(metric_pack(problem, &[z])?.sqrt_det * test_fn(z)))
    };
    let width = (2.0 * eps).sqrt();
    let breaks: Vec<f64> = (-12..=12).map(|i| x + i as f64 * 2.0 * width).collect();
    let mut points: Vec<f64> = std::iter::once(lower)
        .chain(breaks.into_iter().filter(|&b| b > lower && b < upper))
        .chain(std::iter::once(upper))
        .collect();
    points.dedup();
    let opts = QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_depth: 30 };
    let mut total = linalg::zeros(m);
    for w in points.windows(2) {
        let eval = |zs: &[f64]| zs.iter().map(|&z| kernel(z)).collect::<Result<Vec<CMat>>>();
        total += quad::integrate_batched(&eval, w[0], w[1], opts)?.0;
    }
    Ok(linalg::frobenius_distance(&total, &linalg::scalar(m, linalg::c(test_fn(x)))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use proptest::prelude::*;

    fn gaussian(dim: usize, sep2: f64, tau: f64) -> f64 {
        heat_prefactor(dim, tau) * (-sep2 / (4.0 * tau)).exp()
    }

    #[test]
    fn flat_free_psi_is_single_term() {
        let p = presets::flat(2);
        let (x, y) = ([0.4, 0.3], [-0.2, 0.1]);
        let src = ClosedFormSource::new(&p, &x, &y).unwrap();
        let sigma: f64 = 0.5 * (0.36 + 0.04);
        for k in -4..=3 {
            let v = psi_value(&src, k, &x, 6).unwrap();
            let expect = if k <= 0 { (-0.5 * sigma).powi(-k) / factorial((-k) as u32) } else { 0.0 };
            assert!((v.value[(0, 0)].re - expect).abs() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn coincident_psi_one_is_c() {
        let c = 0.8;
        let p = presets::constant_potential(2, c);
        let v = psi(&p, 1, &[0.2, 0.2], &[0.2, 0.2], 5).unwrap();
        assert_eq!(v.value[(0, 0)].re, c);
        let neg = psi_value(&ClosedFormSource::new(&p, &[0.2, 0.2], &[0.2, 0.2]).unwrap(), -2, &[0.2, 0.2], 5).unwrap();
        assert_eq!(neg.value[(0, 0)].re, 0.0);
    }

    #[test]
    fn no_term_below_the_pole_boundary() {
        assert_eq!(surviving_terms(3, 5), 3..=5);
        assert_eq!(surviving_terms(-2, 5), 0..=5);
        assert!(surviving_terms(7, 5).is_empty());
    }

    fn bessel_j(n: i32, x: f64) -> f64 {
        let opts = QuadOptions { abs_tol: 1e-15, rel_tol: 1e-14, max_depth: 40 };
        quad::integrate(|t| (n as f64 * t - x * t.sin()).cos(), 0.0, PI, opts).unwrap() / PI
    }

    #[test]
    fn constant_potential_psi_matches_bessel_sum() {
        // sum_n (-u^2)^n / (n! (n + a)!) = u^{-a} J_a(2u), u^2 = sigma c / 2, a = -k
        let c = 1.3;
        let p = presets::constant_potential(1, c);
        let (x, y) = ([0.9], [-0.4]);
        let src = ClosedFormSource::new(&p, &x, &y).unwrap();
        let sigma = 0.5 * 1.3_f64.powi(2);
        let u = (0.5 * sigma * c).sqrt();
        for k in -3..=0 {
            let a = -k;
            let oracle = (-0.5 * sigma).powi(a) * u.powi(-a) * bessel_j(a, 2.0 * u);
            let v = psi(&p, k, &x, &y, 30).unwrap();
            assert!((v.value[(0, 0)].re - oracle).abs() < 1e-12, "k={k}: {} vs {oracle}", v.value[(0, 0)].re);
        }
        let _ = src;
    }

    #[test]
    fn truncation_guard_fires() {
        let p = presets::constant_potential(1, 3.0);
        let err = psi(&p, 0, &[2.0], &[-2.0], 2).unwrap_err();
        assert!(matches!(err, HeatError::TruncationWarning { .. }));
    }

    #[test]
    fn recursion_free_zero_mode() {
        let p = presets::flat(2);
        let (x, y) = ([0.5, 0.2], [-0.3, -0.1]);
        let src = ClosedFormSource::new(&p, &x, &y).unwrap();
        for k in -3..=2 {
            let r = check_psi_recursion(&src, k, &x, 6).unwrap();
            assert!(r < 1e-6, "k={k}: {r}");
        }
    }

    #[test]
    fn recursion_constant_potential_improves_with_n() {
        let p = presets::constant_potential(2, 3.0);
        let (x, y) = ([1.5, 1.0], [-1.0, -0.5]);
        let src = ClosedFormSource::new(&p, &x, &y).unwrap();
        let r: Vec<f64> = [4, 8, 16].iter().map(|&n| check_psi_recursion(&src, 1, &x, n).unwrap()).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
        let q = presets::constant_potential(2, 1.0);
        let (x, y) = ([0.4, 0.1], [0.1, -0.2]);
        let src = ClosedFormSource::new(&q, &x, &y).unwrap();
        assert!(check_psi_recursion(&src, 1, &x, 8).unwrap() < 1e-4);
    }

    #[test]
    fn free_kernel_from_psi_is_gaussian() {
        let p = presets::flat(1);
        let src = ClosedFormSource::new(&p, &[1.0], &[0.0]).unwrap();
        let k = kernel_from_psi(&src, &[1.0], 0.5, -25, 0).unwrap();
        let exact = (-0.5_f64).exp() / (2.0 * PI).sqrt();
        assert!((k[(0, 0)].re - exact).abs() < 1e-15);
        assert!((exact - 0.24197).abs() < 1e-5);
        let q = presets::constant_potential(1, 1.0);
        let src = ClosedFormSource::new(&q, &[1.0], &[0.0]).unwrap();
        let k = kernel_from_psi(&src, &[1.0], 0.5, -25, 8).unwrap();
        // e^{tau} truncated after tau^8 / 8!
        assert!((k[(0, 0)].re - exact * 0.5_f64.exp()).abs() < exact * 0.5_f64.powi(9) / factorial(9) * 2.0);
    }

    #[test]
    fn split_parts() {
        let p = presets::flat(2);
        let (x, y) = ([0.3, 0.1], [0.0, -0.2]);
        let src = ClosedFormSource::new(&p, &x, &y).unwrap();
        let (km, kp) = kernel_split(&src, &x, 0.3, 20).unwrap();
        assert_eq!(linalg::frobenius(&kp), 0.0);
        assert!((km[(0, 0)].re - gaussian(2, 0.18, 0.3)).abs() < 1e-14);

        let q = presets::constant_potential(2, 0.7);
        let src = ClosedFormSource::new(&q, &x, &y).unwrap();
        let (km, kp) = kernel_split(&src, &x, 0.3, 10).unwrap();
        let whole = kernel_from_psi(&src, &x, 0.3, -10, 11).unwrap();
        assert!(linalg::frobenius_distance(&(km + kp), &whole) < 1e-12);

        let odd = presets::flat(1);
        let src = ClosedFormSource::new(&odd, &[0.1], &[0.0]).unwrap();
        assert!(matches!(kernel_split(&src, &[0.1], 0.3, 3), Err(HeatError::OddDimension { dim: 1 })));
    }

    #[test]
    fn split_parts_solve_the_heat_equation() {
        let q = presets::constant_potential(2, 0.7);
        let (x, y) = ([0.3, 0.1], [0.0, -0.2]);
        let src = ClosedFormSource::new(&q, &x, &y).unwrap();
        let (rm, rp) = split_heat_residual(&src, &x, 0.3, 12, 1e-3).unwrap();
        assert!(rm < 1e-4 && rp < 1e-4, "{rm} {rp}");
    }

    #[test]
    fn shift_identity() {
        let p = presets::flat(1);
        let src = ClosedFormSource::new(&p, &[1.0], &[0.0]).unwrap();
        assert_eq!(shift_check(&src, &[1.0], 0.4, 0.0, 12, -4, 0).unwrap(), 0.0);
        assert!(shift_check(&src, &[1.0], 0.4, 0.05, 12, -4, 0).unwrap() < 1e-8);
        // against the Gaussian itself with a wide window
        let row = PsiRow::new(&src, &[1.0], 0).unwrap();
        let mut taylor = 0.0;
        for j in 0..=12 {
            taylor += 0.05_f64.powi(j as i32) / factorial(j) * tau_derivative(&row, 1, 0.4, -30, 0, j)[(0, 0)].re;
        }
        assert!((taylor - gaussian(1, 1.0, 0.45)).abs() < 1e-8);

        let q = presets::constant_potential(1, 1.0);
        let src = ClosedFormSource::new(&q, &[1.0], &[0.0]).unwrap();
        assert!(shift_check(&src, &[1.0], 0.4, 0.05, 12, -4, 8).unwrap() < 1e-6);
        assert!(shift_check(&src, &[1.0], 0.4, 0.5, 12, -4, 8).is_err());
    }

    #[test]
    fn binomial_sums() {
        let (tau, s) = (0.6, 0.3);
        assert!((binomial_partial_sum(1.0, s, tau, 40) - 1.0 / (tau + s)).abs() < 1e-10);
        assert!((binomial_partial_sum(-2.0, s, tau, 2) - (tau + s).powi(2)).abs() < 1e-15);
        for n in 0..6 {
            assert_eq!(binomial_partial_sum(0.0, s, tau, n), 1.0);
        }
        let ratio = binomial_convergence_ratio(1.5, s, tau, &(20..=40).collect::<Vec<_>>());
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn delta_regularization() {
        let p = presets::flat(1);
        let w = 0.5;
        let bump = |z: f64| (-(z - 0.2) * (z - 0.2) / (2.0 * w * w)).exp();
        let e1 = delta_regularization_check(&p, 0.2, 1e-3, 0, bump, -4.5, 4.5).unwrap();
        let e2 = delta_regularization_check(&p, 0.2, 5e-4, 0, bump, -4.5, 4.5).unwrap();
        // oracle: 1 - w / sqrt(w^2 + 2 eps)
        let oracle = |eps: f64| 1.0 - w / (w * w + 2.0 * eps).sqrt();
        assert!(e1 < 1e-2);
        assert!((e1 - oracle(1e-3)).abs() < 1e-9, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.05, "{}", e1 / e2);
        let one = delta_regularization_check(&p, 0.0, 1e-3, 0, |_| 1.0, -4.5, 4.5).unwrap();
        assert!(one < 1e-9, "{one}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rearrangement_is_exact(
            c in -2.0..2.0_f64,
            x in prop::collection::vec(-1.0..1.0_f64, 2),
            y in prop::collection::vec(-1.0..1.0_f64, 2),
            tau in 0.05..2.0_f64,
            k_min in -8..0_i32,
            k_max in -2..6_i32,
        ) {
            let p = presets::constant_potential(2, c);
            let src = ClosedFormSource::new(&p, &x, &y).unwrap();
            let a = kernel_from_psi(&src, &x, tau, k_min, k_max).unwrap();
            let b = kernel_direct(&src, &x, tau, k_min, k_max).unwrap();
            let scale = linalg::frobenius(&a).max(1e-300);
            prop_assert!(linalg::frobenius_distance(&a, &b) <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn reciprocal_gamma_weights_vanish_exactly(k in -6..8_i32, n in 0..12_usize) {
            for i in 0..=n {
                let w = recip_gamma((i as i32 - k + 1) as f64);
                prop_assert_eq!(w == 0.0, !surviving_terms(k, n).contains(&i));
            }
        }

        #[test]
        fn binomial_sums_converge_geometrically(k in 0.5..2.0_f64, ratio in 0.25..0.7_f64) {
            let tau = 1.0;
            let fit = binomial_convergence_ratio(k, ratio * tau, tau, &(10..=40).collect::<Vec<_>>());
            prop_assert!((fit - ratio).abs() < 0.1 * ratio, "{} vs {}", fit, ratio);
        }
    }
}
