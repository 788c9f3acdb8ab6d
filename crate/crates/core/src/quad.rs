//! Adaptive Gauss-Kronrod (7/15) quadrature for scalar and matrix integrands.
//!
//! Integrands are evaluated in batches of the 15 Kronrod nodes of one
//! subinterval; callers that need a sweep over ordered nodes (transport along
//! a geodesic) get them sorted.

use crate::error::{HeatError, Result};
use crate::linalg::{frobenius, CMat};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

pub trait QuadValue: Clone + Send {
    fn scale(&self, w: f64) -> Self;
    fn add_scaled(&mut self, w: f64, other: &Self);
    fn norm(&self) -> f64;
    fn distance(&self, other: &Self) -> f64;
}

impl QuadValue for f64 {
    fn scale(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
    fn distance(&self, other: &Self) -> f64 {
        (self - other).abs()
    }
}

impl QuadValue for CMat {
    fn scale(&self, w: f64) -> Self {
        self * num_complex::Complex64::new(w, 0.0)
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += other * num_complex::Complex64::new(w, 0.0);
    }
    fn norm(&self) -> f64 {
        frobenius(self)
    }
    fn distance(&self, other: &Self) -> f64 {
        frobenius(&(self - other))
    }
}

/// The 15 Kronrod nodes of `[a, b]` in ascending order.
pub fn kronrod_nodes(a: f64, b: f64) -> [f64; 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [0.0; 15];
    for i in 0..7 {
        out[i] = c - h * XGK[i];
        out[14 - i] = c + h * XGK[i];
    }
    out[7] = c;
    out
}

/// Kronrod and Gauss estimates from values at [`kronrod_nodes`].
fn rule<T: QuadValue>(a: f64, b: f64, values: &[T]) -> (T, T) {
    let h = 0.5 * (b - a);
    let mut k = values[7].scale(WGK[7]);
    let mut g = values[7].scale(WG[3]);
    for i in 0..7 {
        let pair_w = WGK[i];
        k.add_scaled(pair_w, &values[i]);
        k.add_scaled(pair_w, &values[14 - i]);
        if i % 2 == 1 {
            let gw = WG[i / 2];
            g.add_scaled(gw, &values[i]);
            g.add_scaled(gw, &values[14 - i]);
        }
    }
    (k.scale(h), g.scale(h))
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_depth: 30 }
    }
}

/// Adaptive bisection driven by a batch evaluator. `eval` receives the 15
/// ascending nodes of one subinterval.
pub fn integrate_batched<T, F>(eval: &F, a: f64, b: f64, opts: QuadOptions) -> Result<(T, f64)>
where
    T: QuadValue,
    F: Fn(&[f64]) -> Result<Vec<T>>,
{
    if a == b {
        let v = eval(&[a])?;
        return Ok((v[0].scale(0.0), 0.0));
    }
    let nodes = kronrod_nodes(a, b);
    let values = eval(&nodes)?;
    let (k, g) = rule(a, b, &values);
    let err = k.distance(&g);
    let tol = opts.abs_tol.max(opts.rel_tol * k.norm());
    recurse(eval, a, b, k, err, tol, b - a, opts, 0)
}

#[allow(clippy::too_many_arguments)]
fn recurse<T, F>(
    eval: &F,
    a: f64,
    b: f64,
    estimate: T,
    err: f64,
    tol: f64,
    total: f64,
    opts: QuadOptions,
    depth: u32,
) -> Result<(T, f64)>
where
    T: QuadValue,
    F: Fn(&[f64]) -> Result<Vec<T>>,
{
    let local_tol = tol * ((b - a) / total).max(1e-3);
    if err <= local_tol {
        return Ok((estimate, err));
    }
    if depth >= opts.max_depth {
        return Err(HeatError::QuadratureFailure { lower: a, upper: b, estimate: err });
    }
    let mid = 0.5 * (a + b);
    let nl = kronrod_nodes(a, mid);
    let nr = kronrod_nodes(mid, b);
    let vl = eval(&nl)?;
    let vr = eval(&nr)?;
    let (kl, gl) = rule(a, mid, &vl);
    let (kr, gr) = rule(mid, b, &vr);
    let el = kl.distance(&gl);
    let er = kr.distance(&gr);
    // Accept the split as soon as the refined pair meets the parent budget.
    if el + er <= local_tol {
        let mut sum = kl;
        sum.add_scaled(1.0, &kr);
        return Ok((sum, el + er));
    }
    let (left, e1) = recurse(eval, a, mid, kl, el, tol, total, opts, depth + 1)?;
    let (right, e2) = recurse(eval, mid, b, kr, er, tol, total, opts, depth + 1)?;
    let mut sum = left;
    sum.add_scaled(1.0, &right);
    Ok((sum, e1 + e2))
}

/// Scalar adaptive integral of a pointwise function.
pub fn integrate<F>(f: F, a: f64, b: f64, opts: QuadOptions) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let eval = |xs: &[f64]| -> Result<Vec<f64>> { Ok(xs.iter().map(|&x| f(x)).collect()) };
    integrate_batched(&eval, a, b, opts).map(|(v, _)| v)
}

/// Scalar integral over `[a, b]` split at the given interior break points,
/// which keeps narrow peaks from being missed by the first 15-point rule.
pub fn integrate_with_breaks<F>(f: F, a: f64, b: f64, breaks: &[f64], opts: QuadOptions) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let mut points: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&p| p > a && p < b))
        .chain(std::iter::once(b))
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let pieces = (points.len() - 1) as f64;
    let piece_opts = QuadOptions { abs_tol: opts.abs_tol / pieces, ..opts };
    let mut total = 0.0;
    for w in points.windows(2) {
        total += integrate(&f, w[0], w[1], piece_opts)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = integrate(|x| x.powi(20) + 3.0 * x, 0.0, 1.0, QuadOptions::default()).unwrap();
        assert!((v - (1.0 / 21.0 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn peaked_gaussian_with_breaks() {
        let w = 1e-3_f64;
        let f = |x: f64| (-(x - 0.3).powi(2) / (2.0 * w * w)).exp();
        let v = integrate_with_breaks(f, -1.0, 1.0, &[0.3 - 20.0 * w, 0.3, 0.3 + 20.0 * w], QuadOptions::default())
            .unwrap();
        let exact = w * (2.0 * std::f64::consts::PI).sqrt();
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
    }

    #[test]
    fn nodes_are_sorted() {
        let n = kronrod_nodes(0.0, 1.0);
        assert!(n.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(n[7], 0.5);
    }

    #[test]
    fn oscillatory_needs_refinement() {
        let v = integrate(|x| (40.0 * x).sin(), 0.0, 3.0, QuadOptions::default()).unwrap();
        let exact = (1.0 - (120.0_f64).cos()) / 40.0;
        assert!((v - exact).abs() < 1e-10);
    }
}
