//! Flat-space Feynman-Kac estimate of the local heat kernel.
//!
//! With `g^{mu nu} = delta^{mu nu}` and fields extended to all of `R^d`,
//!
//! `K(x, y; tau) = e^{-|x-y|^2/4tau} (4 pi tau)^{-d/2} E[ P exp int_0^1 M_tau(q(t)) dt ]`,
//!
//! `q = sqrt(tau) u + y + t (x - y)`, `M_tau dt = -dq^mu B_mu(q) + tau v(q) dt`,
//! averaged over Brownian-bridge loops `u` with `Var u_mu(t) = 2 t (1 - t)`.
//! Later slices multiply on the left, so `tau -> 0` gives the Wilson line
//! `a_0(x, y)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HeatError, Result};
use crate::geometry::{ChartBox, LaplaceProblem, MatrixField, MetricField};
use crate::linalg::{self, CMat};
use crate::sdw;

/// Relative allowance for rounding in comparisons that are exact in
/// arithmetic (coupled sides, saturated bounds).
pub const ROUNDING_FLOOR: f64 = 1e-12;

/// Euclidean problem on `R^d` with already extended fields.
#[derive(Debug, Clone)]
pub struct FlatProblem {
    pub name: String,
    pub dim: usize,
    pub fiber_dim: usize,
    pub connection: Vec<MatrixField>,
    pub potential: MatrixField,
}

impl FlatProblem {
    pub fn new(name: impl Into<String>, connection: Vec<MatrixField>, potential: MatrixField) -> Result<Self> {
        let dim = connection.len();
        if dim == 0 {
            return Err(HeatError::InvalidProblem("dimension must be positive".into()));
        }
        let fiber_dim = potential.fiber_dim();
        if let Some(bad) = connection.iter().find(|b| b.fiber_dim() != fiber_dim) {
            return Err(HeatError::DimensionMismatch { expected: fiber_dim, found: bad.fiber_dim() });
        }
        Ok(FlatProblem { name: name.into(), dim, fiber_dim, connection, potential })
    }

    /// Takes the fields of a chart problem with identity metric as their own
    /// extension.
    pub fn from_problem(problem: &LaplaceProblem) -> Result<Self> {
        match &problem.metric_inv {
            MetricField::Constant(g) if *g == nalgebra::DMatrix::identity(problem.dim, problem.dim) => {}
            _ => return Err(HeatError::InvalidProblem(format!("{} does not have a Euclidean metric", problem.name))),
        }
        FlatProblem::new(problem.name.clone(), problem.connection.clone(), problem.potential.clone())
    }

    pub fn connection_is_zero(&self) -> bool {
        self.connection.iter().all(MatrixField::is_zero)
    }

    /// `B -> sqrt(tau) B(sqrt(tau) . + z)`, `v -> tau v(sqrt(tau) . + z)`.
    pub fn rescaled(&self, tau: f64, z: &[f64]) -> FlatProblem {
        let st = tau.sqrt();
        FlatProblem {
            name: format!("{}-rescaled", self.name),
            dim: self.dim,
            fiber_dim: self.fiber_dim,
            connection: self.connection.iter().map(|b| b.rescaled(st, st, z)).collect(),
            potential: self.potential.rescaled(tau, st, z),
        }
    }
}

/// Loop sampled at `t_i = i / n`; `positions[0]` and `positions[n]` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeLoop {
    pub positions: Vec<Vec<f64>>,
}

impl BridgeLoop {
    pub fn n_steps(&self) -> usize {
        self.positions.len() - 1
    }
}

/// Bridge `u_i = W_i - t_i W_n` from a walk with `N(0, 2 dt)` increments.
pub fn sample_bridge<R: Rng + ?Sized>(rng: &mut R, dim: usize, n_steps: usize) -> Result<BridgeLoop> {
    if n_steps < 2 {
        return Err(HeatError::InvalidArgument(format!("a bridge needs at least 2 steps, got {n_steps}")));
    }
    let sd = (2.0 / n_steps as f64).sqrt();
    let mut walk = vec![vec![0.0; dim]; n_steps + 1];
    for i in 1..=n_steps {
        for mu in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            walk[i][mu] = walk[i - 1][mu] + sd * z;
        }
    }
    let end = walk[n_steps].clone();
    for (i, w) in walk.iter_mut().enumerate() {
        let t = i as f64 / n_steps as f64;
        for (wm, em) in w.iter_mut().zip(&end) {
            *wm -= t * em;
        }
    }
    walk[0].iter_mut().for_each(|v| *v = 0.0);
    walk[n_steps].iter_mut().for_each(|v| *v = 0.0);
    Ok(BridgeLoop { positions: walk })
}

/// One loop's ordered product and the midpoint with the largest `Re v_11`.
#[derive(Clone)]
struct PathSample {
    value: CMat,
    v_max: f64,
    v_argmax: Vec<f64>,
}

/// Ordered product over slices `[t_i, t_{i + stride}]` with the
/// Stratonovich midpoint rule.
fn path_functional(
    bridge: &BridgeLoop,
    stride: usize,
    tau: f64,
    x: &[f64],
    y: &[f64],
    problem: &FlatProblem,
) -> PathSample {
    let n = bridge.n_steps();
    let d = problem.dim;
    let m = problem.fiber_dim;
    let dt = stride as f64 / n as f64;
    let st = tau.sqrt();
    let point = |i: usize| -> Vec<f64> {
        let t = i as f64 / n as f64;
        (0..d).map(|mu| st * bridge.positions[i][mu] + y[mu] + t * (x[mu] - y[mu])).collect()
    };
    let scalar = m == 1;
    let mut exponent = linalg::c(0.0);
    let mut product = linalg::identity(m);
    let mut v_max = f64::NEG_INFINITY;
    let mut v_argmax = Vec::new();
    let mut q0 = point(0);
    for i in (0..n).step_by(stride) {
        let q1 = point(i + stride);
        let mid: Vec<f64> = q0.iter().zip(&q1).map(|(a, b)| 0.5 * (a + b)).collect();
        let v = problem.potential.eval(&mid);
        if v[(0, 0)].re > v_max {
            v_max = v[(0, 0)].re;
            v_argmax.clone_from(&mid);
        }
        let mut gen = v * linalg::c(tau * dt);
        for (mu, b) in problem.connection.iter().enumerate() {
            if !b.is_zero() {
                gen -= b.eval(&mid) * linalg::c(q1[mu] - q0[mu]);
            }
        }
        if scalar {
            exponent += gen[(0, 0)];
        } else {
            product = linalg::expm(&gen) * product;
        }
        q0 = q1;
    }
    if scalar {
        product[(0, 0)] = exponent.exp();
    }
    PathSample { value: product, v_max, v_argmax }
}

/// `2 F_n - F_{n/2}` on the same loop, cancelling the `O(1/n)` weak bias of
/// the midpoint rule.
fn extrapolated_functional(bridge: &BridgeLoop, tau: f64, x: &[f64], y: &[f64], problem: &FlatProblem) -> PathSample {
    let fine = path_functional(bridge, 1, tau, x, y, problem);
    let coarse = path_functional(bridge, 2, tau, x, y, problem);
    PathSample { value: fine.value * linalg::c(2.0) - coarse.value, ..fine }
}

/// `P exp int_0^1 M_tau(sqrt(tau) u + y + t (x - y)) dt` for one loop.
pub fn ordered_exponential(bridge: &BridgeLoop, tau: f64, x: &[f64], y: &[f64], problem: &FlatProblem) -> CMat {
    path_functional(bridge, 1, tau, x, y, problem).value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McParams {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Combine `n_steps` and `n_steps / 2` slices on each loop; needs an even
    /// `n_steps >= 4`.
    #[serde(default = "default_extrapolate")]
    pub extrapolate: bool,
}

fn default_extrapolate() -> bool {
    true
}

impl Default for McParams {
    fn default() -> Self {
        McParams { n_paths: 200_000, n_steps: 128, seed: 0, extrapolate: true }
    }
}

/// Stream `path` of the ChaCha8 generator keyed by `seed`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn check_inputs(problem: &FlatProblem, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> Result<()> {
    for p in [x, y] {
        if p.len() != problem.dim {
            return Err(HeatError::DimensionMismatch { expected: problem.dim, found: p.len() });
        }
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(HeatError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if params.n_paths < 2 {
        return Err(HeatError::InvalidArgument("at least two paths are needed".into()));
    }
    if params.n_steps < 2 {
        return Err(HeatError::InvalidArgument("at least two steps are needed".into()));
    }
    if params.extrapolate && (params.n_steps < 4 || params.n_steps % 2 == 1) {
        return Err(HeatError::InvalidArgument(format!(
            "extrapolation needs an even step count of at least 4, got {}",
            params.n_steps
        )));
    }
    Ok(())
}

/// Per-path samples in path order.
fn sample_paths(problem: &FlatProblem, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> Result<Vec<PathSample>> {
    check_inputs(problem, x, y, tau, params)?;
    if problem.connection_is_zero() && problem.potential.is_constant() {
        // every loop weight is exactly e^{tau V}
        let v = problem.potential.eval(y);
        let one = PathSample { value: linalg::expm(&(&v * linalg::c(tau))), v_max: v[(0, 0)].re, v_argmax: y.to_vec() };
        return Ok(vec![one; params.n_paths]);
    }
    (0..params.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(params.seed, i);
            let bridge = sample_bridge(&mut rng, problem.dim, params.n_steps)?;
            Ok(if params.extrapolate {
                extrapolated_functional(&bridge, tau, x, y, problem)
            } else {
                path_functional(&bridge, 1, tau, x, y, problem)
            })
        })
        .collect()
}

/// Per-path functionals `P exp(...)` in path order.
pub fn path_functionals(problem: &FlatProblem, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> Result<Vec<CMat>> {
    Ok(sample_paths(problem, x, y, tau, params)?.into_iter().map(|p| p.value).collect())
}

/// `e^{-|x-y|^2/4tau} (4 pi tau)^{-d/2}`
pub fn free_prefactor(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (4.0 * tau)).exp() * (4.0 * std::f64::consts::PI * tau).powf(-0.5 * x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    #[serde(with = "linalg::serde_cmat")]
    pub mean: CMat,
    /// Row-major; entry `(i, j)` is `sqrt(var re + var im) / sqrt(n)`.
    pub stderr: Vec<Vec<f64>>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub tau: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl MCEstimate {
    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }

    pub fn stderr_at(&self, i: usize, j: usize) -> f64 {
        self.stderr[i][j]
    }
}

/// Mean and per-entry standard error of `scale * values`. Deviations are
/// taken from the first sample, so identical samples give exactly that
/// sample and a zero error.
fn summarize(values: &[CMat], scale: f64) -> (CMat, Vec<Vec<f64>>) {
    let n = values.len();
    let m = values[0].nrows();
    let base = &values[0];
    let shifted: Vec<CMat> = values.iter().map(|v| v - base).collect();
    let mean_shift = linalg::pairwise_sum(&shifted) * linalg::c(1.0 / n as f64);
    let mean = (base + &mean_shift) * linalg::c(scale);
    let mut stderr = vec![vec![0.0; m]; m];
    for (i, row) in stderr.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            let sq: Vec<f64> = shifted.iter().map(|s| (s[(i, j)] - mean_shift[(i, j)]).norm_sqr()).collect();
            let var = linalg::pairwise_sum_f64(&sq) / (n as f64 - 1.0);
            *e = scale.abs() * (var / n as f64).sqrt();
        }
    }
    (mean, stderr)
}

fn estimate(values: &[CMat], scale: f64, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> MCEstimate {
    let (mean, stderr) = summarize(values, scale);
    MCEstimate {
        mean,
        stderr,
        n_paths: params.n_paths,
        n_steps: params.n_steps,
        seed: params.seed,
        tau,
        x: x.to_vec(),
        y: y.to_vec(),
    }
}

/// Monte Carlo kernel: prefactor times the mean path functional.
pub fn kernel_mc(problem: &FlatProblem, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> Result<MCEstimate> {
    let values = path_functionals(problem, x, y, tau, params)?;
    Ok(estimate(&values, free_prefactor(x, y, tau), x, y, tau, params))
}

/// Coupled comparison of the two sides of a Monte Carlo identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledReport {
    pub lhs: MCEstimate,
    pub rhs: MCEstimate,
    #[serde(with = "linalg::serde_cmat")]
    pub diff_mean: CMat,
    pub diff_stderr: Vec<Vec<f64>>,
    pub passed: bool,
}

fn coupled(lhs_values: &[CMat], lhs_scale: f64, rhs_values: &[CMat], rhs_scale: f64) -> (CMat, Vec<Vec<f64>>, bool) {
    let diffs: Vec<CMat> = lhs_values
        .iter()
        .zip(rhs_values)
        .map(|(a, b)| a * linalg::c(lhs_scale) - b * linalg::c(rhs_scale))
        .collect();
    let (mean, stderr) = summarize(&diffs, 1.0);
    let (lhs_mean, _) = summarize(lhs_values, lhs_scale);
    let floor = ROUNDING_FLOOR * linalg::frobenius(&lhs_mean);
    let m = mean.nrows();
    let passed = (0..m).all(|i| (0..m).all(|j| mean[(i, j)].norm() <= 3.0 * stderr[i][j] + floor));
    (mean, stderr, passed)
}

/// Both sides of
/// `K(x, y; tau)[B, v] = tau^{-d/2} K((x-z)/sqrt tau, (y-z)/sqrt tau; 1)[sqrt(tau) B(sqrt(tau) . + z), tau v(sqrt(tau) . + z)]`
/// on the same loops.
pub fn scaling_check(
    problem: &FlatProblem,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tau: f64,
    params: &McParams,
) -> Result<CoupledReport> {
    if z.len() != problem.dim {
        return Err(HeatError::DimensionMismatch { expected: problem.dim, found: z.len() });
    }
    let st = tau.sqrt();
    let xs: Vec<f64> = x.iter().zip(z).map(|(a, b)| (a - b) / st).collect();
    let ys: Vec<f64> = y.iter().zip(z).map(|(a, b)| (a - b) / st).collect();
    let scaled = problem.rescaled(tau, z);
    let lhs_values = path_functionals(problem, x, y, tau, params)?;
    let rhs_values = path_functionals(&scaled, &xs, &ys, 1.0, params)?;
    let lhs_scale = free_prefactor(x, y, tau);
    let rhs_scale = tau.powf(-0.5 * problem.dim as f64) * free_prefactor(&xs, &ys, 1.0);
    let (diff_mean, diff_stderr, passed) = coupled(&lhs_values, lhs_scale, &rhs_values, rhs_scale);
    Ok(CoupledReport {
        lhs: estimate(&lhs_values, lhs_scale, x, y, tau, params),
        rhs: estimate(&rhs_values, rhs_scale, &xs, &ys, 1.0, params),
        diff_mean,
        diff_stderr,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalScalingReport {
    pub tau: f64,
    #[serde(with = "linalg::serde_cmats")]
    pub original: Vec<CMat>,
    #[serde(with = "linalg::serde_cmats")]
    pub substituted: Vec<CMat>,
    /// `max_k ||a'_k - a_k / tau^k||_F / max(1, ||a_k / tau^k||_F)`
    pub max_defect: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `B -> B(./sqrt tau)/sqrt tau`, `v -> v(./sqrt tau)/tau`, `x -> sqrt(tau) x`
/// on a constant-metric chart; the chart box, the diagonal offset and the
/// stencil width scale with the coordinates.
pub fn substituted_problem(problem: &LaplaceProblem, tau: f64) -> Result<LaplaceProblem> {
    if !problem.metric_inv.is_constant() {
        return Err(HeatError::InvalidProblem("coefficient scaling needs a constant metric".into()));
    }
    let st = tau.sqrt();
    let origin = vec![0.0; problem.dim];
    let domain = ChartBox::new(
        problem.domain.lower.iter().map(|v| v * st).collect(),
        problem.domain.upper.iter().map(|v| v * st).collect(),
    )?;
    let mut settings = problem.settings.clone();
    let eps = settings.diag_eps;
    settings.stencil_width = Some(problem.settings.stencil_for(eps) * st);
    settings.diag_eps = eps * st;
    Ok(LaplaceProblem::new(
        format!("{}-substituted", problem.name),
        problem.metric_inv.clone(),
        problem.connection.iter().map(|b| b.rescaled(1.0 / st, 1.0 / st, &origin)).collect(),
        problem.potential.rescaled(1.0 / tau, 1.0 / st, &origin),
        domain,
    )?
    .with_settings(settings))
}

/// Diagonal coefficients of the original and substituted problems, checked
/// against `a_k(x, x) / tau^k` for `k <= order`.
pub fn diagonal_scaling_check(problem: &LaplaceProblem, x: &[f64], tau: f64, order: usize) -> Result<DiagonalScalingReport> {
    if !(tau > 0.0) {
        return Err(HeatError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let sub = substituted_problem(problem, tau)?;
    let xs: Vec<f64> = x.iter().map(|v| v * tau.sqrt()).collect();
    let original = sdw::sdw_diagonal(problem, x, order)?;
    let substituted = sdw::sdw_diagonal(&sub, &xs, order)?;
    let mut max_defect = 0.0_f64;
    for (k, (a, b)) in original.iter().zip(&substituted).enumerate() {
        let target = a * linalg::c(tau.powi(-(k as i32)));
        let defect = linalg::frobenius_distance(b, &target) / linalg::frobenius(&target).max(1.0);
        max_defect = max_defect.max(defect);
    }
    let tolerance = problem.settings.recur_tol;
    Ok(DiagonalScalingReport { tau, original, substituted, max_defect, tolerance, passed: max_defect <= tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub max_weight: f64,
    pub paths: usize,
    pub paths_within: usize,
    pub kernel: MCEstimate,
    /// `e^{-|x-y|^2/4tau} (4 pi tau)^{-d/2} e^{tau c}`
    pub kernel_bound: f64,
    pub passed: bool,
}

/// Pathwise `P exp(...) <= e^{tau c}` and `K <= free kernel * e^{tau c}` for a
/// scalar potential below `c` and no connection.
pub fn bound_check(problem: &FlatProblem, c: f64, x: &[f64], y: &[f64], tau: f64, params: &McParams) -> Result<BoundReport> {
    if !problem.connection_is_zero() || problem.fiber_dim != 1 {
        return Err(HeatError::InvalidProblem("the bound needs B = 0 and a scalar potential".into()));
    }
    // the pathwise bound holds for genuine loop weights, not extrapolants
    let params = &McParams { extrapolate: false, ..*params };
    let samples = sample_paths(problem, x, y, tau, params)?;
    if let Some(bad) = samples.iter().find(|s| s.v_max > c) {
        return Err(HeatError::SupremumViolated { value: bad.v_max, bound: c, point: bad.v_argmax.clone() });
    }
    let bound = (tau * c).exp();
    let limit = bound * (1.0 + ROUNDING_FLOOR);
    let weights: Vec<f64> = samples.iter().map(|s| s.value[(0, 0)].re).collect();
    let paths_within = weights.iter().filter(|&&w| w <= limit).count();
    let max_weight = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values: Vec<CMat> = samples.into_iter().map(|s| s.value).collect();
    let pre = free_prefactor(x, y, tau);
    let kernel = estimate(&values, pre, x, y, tau, params);
    let kernel_bound = pre * bound;
    let mean_ok = kernel.mean[(0, 0)].re <= kernel_bound * (1.0 + ROUNDING_FLOOR) + 3.0 * kernel.stderr[0][0];
    Ok(BoundReport {
        bound,
        max_weight,
        paths: params.n_paths,
        paths_within,
        kernel,
        kernel_bound,
        passed: paths_within == params.n_paths && mean_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub ratio: f64,
    pub stderr: f64,
    pub expected: f64,
    pub passed: bool,
}

/// `K(-center, -center) / K(center, center)` for the two-well potential on
/// shared loops, against `e^{(c1 - c2) tau}`.
pub fn two_well_ratio(c1: f64, c2: f64, width: f64, center: f64, tau: f64, params: &McParams) -> Result<RatioReport> {
    let problem = FlatProblem::from_problem(&crate::presets::two_well(c1, c2, width, center))?;
    let a = path_functionals(&problem, &[-center], &[-center], tau, params)?;
    let b = path_functionals(&problem, &[center], &[center], tau, params)?;
    let n = a.len() as f64;
    let ra: Vec<f64> = a.iter().map(|v| v[(0, 0)].re).collect();
    let rb: Vec<f64> = b.iter().map(|v| v[(0, 0)].re).collect();
    let ma = linalg::pairwise_sum_f64(&ra) / n;
    let mb = linalg::pairwise_sum_f64(&rb) / n;
    let ratio = ma / mb;
    // delta method for a ratio of paired means
    let resid: Vec<f64> = ra.iter().zip(&rb).map(|(p, q)| ((p - ma) - ratio * (q - mb)).powi(2)).collect();
    let stderr = (linalg::pairwise_sum_f64(&resid) / (n - 1.0) / n).sqrt() / mb.abs();
    let expected = ((c1 - c2) * tau).exp();
    let passed = (ratio - expected).abs() <= 3.0 * stderr + ROUNDING_FLOOR * expected;
    Ok(RatioReport { ratio, stderr, expected, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn mehler(omega: f64, x: f64, y: f64, tau: f64) -> f64 {
        let s = (2.0 * omega * tau).sinh();
        let ch = (2.0 * omega * tau).cosh();
        (omega / (2.0 * std::f64::consts::PI * s)).sqrt() * (-omega * ((x * x + y * y) * ch - 2.0 * x * y) / (2.0 * s)).exp()
    }

    fn small(n_paths: usize) -> McParams {
        McParams { n_paths, n_steps: 64, seed: 7, ..Default::default() }
    }

    #[test]
    fn bridge_is_pinned_and_has_the_right_variance() {
        let n = 100_000;
        let mut mids = Vec::with_capacity(n);
        for i in 0..n {
            let b = sample_bridge(&mut path_rng(3, i), 1, 16).unwrap();
            assert_eq!(b.positions[0][0], 0.0);
            assert_eq!(b.positions[16][0], 0.0);
            mids.push(b.positions[8][0]);
        }
        let mean = mids.iter().sum::<f64>() / n as f64;
        let var = mids.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // Var of the sample variance of a normal is 2 sigma^4 / (n - 1)
        let var_se = (2.0 * 0.25 / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.5).abs() < 3.0 * var_se, "{var}");
        assert!(mean.abs() < 3.0 * (0.5 / n as f64).sqrt(), "{mean}");
        assert!(sample_bridge(&mut path_rng(0, 0), 1, 1).is_err());
    }

    #[test]
    fn empty_fields_give_identity() {
        let p = FlatProblem::from_problem(&presets::flat(2)).unwrap();
        let b = sample_bridge(&mut path_rng(1, 0), 2, 8).unwrap();
        assert_eq!(ordered_exponential(&b, 0.7, &[0.1, 0.2], &[0.0, 0.0], &p), linalg::identity(1));
    }

    #[test]
    fn free_kernel_exact() {
        let p = FlatProblem::from_problem(&presets::flat(1)).unwrap();
        let est = kernel_mc(&p, &[1.0], &[0.0], 0.5, &small(1000)).unwrap();
        let exact = (-0.5_f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_eq!(est.max_stderr(), 0.0);
        assert!((est.mean[(0, 0)].re - exact).abs() < 1e-15);
    }

    #[test]
    fn abelian_functional_is_path_independent() {
        let (xi, c) = ([0.4, -0.3], 0.8);
        let p = FlatProblem::from_problem(&presets::abelian_phase(&xi, c)).unwrap();
        let (x, y, tau) = ([0.5, 0.2], [-0.1, 0.4], 0.6);
        let expo = Complex64::new(tau * c, -(0.6 * 0.4 + (-0.2) * (-0.3)));
        let closed = expo.exp();
        for w in path_functionals(&p, &x, &y, tau, &small(200)).unwrap() {
            assert!((w[(0, 0)] - closed).norm() < 1e-13);
        }
    }

    #[test]
    fn nonabelian_tau_zero_limit_is_wilson_line() {
        let chart = presets::nonabelian_constant(0.6, 0.9, 0.3);
        let p = FlatProblem::from_problem(&chart).unwrap();
        let (x, y) = ([0.5, -0.2], [-0.1, 0.3]);
        let a0 = sdw::a0(&chart, &x, &y).unwrap();
        let tau = 1e-3;
        let est = kernel_mc(&p, &x, &y, tau, &McParams { n_paths: 4000, n_steps: 64, seed: 11, ..Default::default() }).unwrap();
        let ratio = est.mean.clone() * linalg::c(1.0 / free_prefactor(&x, &y, tau));
        let se = est.max_stderr() / free_prefactor(&x, &y, tau);
        assert!(linalg::frobenius_distance(&ratio, &a0) < 3.0 * se + 10.0 * tau, "{ratio} vs {a0}");
    }

    #[test]
    fn harmonic_matches_mehler() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let est = kernel_mc(&p, &[0.3], &[-0.2], 0.3, &McParams { n_paths: 40_000, n_steps: 64, seed: 5, ..Default::default() }).unwrap();
        let oracle = mehler(1.0, 0.3, -0.2, 0.3);
        assert!((est.mean[(0, 0)].re - oracle).abs() < 3.0 * est.stderr[0][0], "{} vs {oracle}", est.mean);
    }

    #[test]
    fn extrapolation_removes_first_order_bias() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let oracle = mehler(1.0, 0.3, -0.2, 0.6);
        let run = |extrapolate| {
            let params = McParams { n_paths: 20_000, n_steps: 8, seed: 2, extrapolate };
            kernel_mc(&p, &[0.3], &[-0.2], 0.6, &params).unwrap()
        };
        let (plain, two_level) = (run(false), run(true));
        let plain_err = (plain.mean[(0, 0)].re - oracle).abs();
        let two_level_err = (two_level.mean[(0, 0)].re - oracle).abs();
        assert!(plain_err > 3.0 * plain.stderr[0][0], "{plain_err}");
        assert!(two_level_err < 3.0 * two_level.stderr[0][0], "{two_level_err}");
        let odd = McParams { n_paths: 10, n_steps: 7, seed: 0, extrapolate: true };
        assert!(kernel_mc(&p, &[0.3], &[-0.2], 0.6, &odd).is_err());
    }

    #[test]
    fn step_doubling_is_consistent() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let a = kernel_mc(&p, &[0.2], &[0.0], 0.5, &McParams { n_paths: 20_000, n_steps: 64, seed: 9, ..Default::default() }).unwrap();
        let b = kernel_mc(&p, &[0.2], &[0.0], 0.5, &McParams { n_paths: 20_000, n_steps: 128, seed: 9, ..Default::default() }).unwrap();
        assert!((a.mean[(0, 0)].re - b.mean[(0, 0)].re).abs() < 3.0 * a.stderr[0][0].max(b.stderr[0][0]));
    }

    #[test]
    fn same_seed_same_bits() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let a = kernel_mc(&p, &[0.2], &[0.1], 0.4, &small(3000)).unwrap();
        let b = kernel_mc(&p, &[0.2], &[0.1], 0.4, &small(3000)).unwrap();
        assert_eq!(a.mean[(0, 0)].re.to_bits(), b.mean[(0, 0)].re.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn scaling_sides_agree() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        for tau in [0.25, 1.0] {
            let r = scaling_check(&p, &[0.4], &[0.4], &[0.4], tau, &small(5000)).unwrap();
            assert!(r.passed, "{r:?}");
        }
        let free = FlatProblem::from_problem(&presets::flat(2)).unwrap();
        let r = scaling_check(&free, &[0.3, 0.1], &[0.0, 0.2], &[0.1, 0.1], 0.5, &small(100)).unwrap();
        assert!(r.passed);
        assert_eq!(r.lhs.max_stderr(), 0.0);
    }

    #[test]
    fn diagonal_coefficients_scale() {
        let q = presets::constant_potential(1, 0.8);
        let r = diagonal_scaling_check(&q, &[0.3], 0.5, 3).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.substituted[3][(0, 0)].re - (0.8_f64 / 0.5).powi(3) / 6.0).abs() < 1e-6);
        assert!((r.substituted[0][(0, 0)].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_holds_pathwise() {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let r = bound_check(&p, 0.0, &[0.3], &[0.1], 1.0, &small(2000)).unwrap();
        assert!(r.passed && r.paths_within == r.paths);
        let q = FlatProblem::from_problem(&presets::constant_potential(1, 0.4)).unwrap();
        let r = bound_check(&q, 0.4, &[0.3], &[0.1], 1.0, &small(200)).unwrap();
        assert!(r.passed);
        assert!((r.kernel.mean[(0, 0)].re - r.kernel_bound).abs() < 1e-14);
        let err = bound_check(&p, -0.5, &[0.3], &[0.1], 1.0, &small(50)).unwrap_err();
        assert!(matches!(err, HeatError::SupremumViolated { .. }));
    }

    #[test]
    fn two_wells_differ_by_their_levels() {
        let r = two_well_ratio(1.0, -1.0, 0.2, 5.0, 0.5, &small(2000)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn constant_potential_weight_is_exact(c in -2.0..2.0_f64, tau in 0.05..2.0_f64, seed in 0..1000_u64) {
            let p = FlatProblem::from_problem(&presets::constant_potential(1, c)).unwrap();
            let est = kernel_mc(&p, &[0.2], &[-0.1], tau, &McParams { n_paths: 50, n_steps: 16, seed, ..Default::default() }).unwrap();
            let exact = free_prefactor(&[0.2], &[-0.1], tau) * (c * tau).exp();
            prop_assert_eq!(est.max_stderr(), 0.0);
            prop_assert!((est.mean[(0, 0)].re - exact).abs() <= 1e-13 * exact);
        }

        #[test]
        fn bridge_endpoints_are_exact(seed in 0..10_000_u64, dim in 1..4_usize, n in 2..40_usize) {
            let b = sample_bridge(&mut path_rng(seed, 0), dim, n).unwrap();
            prop_assert!(b.positions[0].iter().chain(&b.positions[n]).all(|&v| v == 0.0));
        }
    }
}
