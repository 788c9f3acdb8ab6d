//! Off-diagonal Seeley-DeWitt coefficients by transport along geodesics.
//!
//! Along the affine geodesic `gamma` from `y` (`gamma(1) = x`),
//! `sigma^mu D_mu = lambda (d/dlambda + gamma'^mu B_mu)`. Writing
//! `a_{k+1} = W a~` with `W` the partial Wilson line turns the recurrence
//! `(k + 1 + sigma^mu D_mu) a_{k+1} = R_k`,
//! `R_k = -Delta^{-1/2} A (Delta^{1/2} a_k)`, into
//!
//! `a_{k+1}(x) = W(1) int_0^1 s^k W(s)^{-1} R_k(gamma(s)) ds`,
//!
//! the solution regular at `lambda = 0`. `A` acts in the first argument, so
//! `a_k` is needed on an operator stencil around every quadrature node. The
//! engine memoises two-point values under coordinates rounded to 12 decimal
//! digits; a value is always computed at the exact point first requested.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use dashmap::DashMap;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HeatError, Result};
use crate::geometry::{self, LaplaceProblem, Shot, ShootingStart};
use crate::linalg::{self, CMat};
use crate::ode::{self, Controller};
use crate::quad::{self, QuadOptions};
use crate::synge;

/// Memo-key resolution per coordinate unit.
pub const LATTICE: f64 = 1e12;

pub type Key = Vec<i64>;

pub fn quantize(x: &[f64]) -> Key {
    x.iter().map(|v| (v * LATTICE).round() as i64).collect()
}

pub fn lattice_point(key: &[i64]) -> Vec<f64> {
    key.iter().map(|&k| k as f64 / LATTICE).collect()
}

/// Second-order operator from samples at one scale `H`.
struct Samples {
    center: CMat,
    plus: Vec<CMat>,
    minus: Vec<CMat>,
    /// `(mu, nu)` with `mu < nu` mapped to `[pp, pm, mp, mm]`.
    mixed: Vec<((usize, usize), [CMat; 4])>,
}

fn sqrt_det_inv_metric(g_inv: &DMatrix<f64>) -> f64 {
    // sqrt(det g_{mu nu}) = 1 / sqrt(det g^{mu nu})
    1.0 / g_inv.determinant().sqrt()
}

fn operator_at(problem: &LaplaceProblem, z: &[f64], h: f64, s: &Samples) -> CMat {
    let d = problem.dim;
    let m = problem.fiber_dim;
    let g = problem.metric_inv.eval(z);
    let b: Vec<CMat> = problem.connection.iter().map(|f| f.eval(z)).collect();
    let v = problem.potential.eval(z);
    let cx = linalg::c;
    let shifted = |mu: usize, sign: f64| {
        let mut p = z.to_vec();
        p[mu] += sign * h;
        p
    };

    let grad: Vec<CMat> = (0..d).map(|mu| (&s.plus[mu] - &s.minus[mu]) * cx(0.5 / h)).collect();
    let mut lap = linalg::zeros(m);
    for mu in 0..d {
        lap += (&s.plus[mu] + &s.minus[mu] - &s.center * cx(2.0)) * cx(g[(mu, mu)] / (h * h));
    }
    for ((mu, nu), [pp, pm, mp, mm]) in &s.mixed {
        let (mu, nu) = (*mu, *nu);
        let second = (pp - pm - mp + mm) * cx(0.25 / (h * h));
        lap += second * cx(g[(mu, nu)] + g[(nu, mu)]);
    }

    let mut out = lap;
    if !problem.connection_is_zero() {
        let mut div_b = linalg::zeros(m);
        for (nu, field) in problem.connection.iter().enumerate() {
            if field.is_constant() {
                continue;
            }
            for mu in 0..d {
                if g[(mu, nu)] != 0.0 {
                    let db = (field.eval(&shifted(mu, 1.0)) - field.eval(&shifted(mu, -1.0))) * cx(0.5 / h);
                    div_b += db * cx(g[(mu, nu)]);
                }
            }
        }
        out += div_b * &s.center;
        for mu in 0..d {
            for nu in 0..d {
                if g[(mu, nu)] == 0.0 {
                    continue;
                }
                out += (&b[mu] * &grad[nu]) * cx(2.0 * g[(mu, nu)]);
                out += (&b[mu] * &b[nu] * &s.center) * cx(g[(mu, nu)]);
            }
        }
    }
    let mut result = -out - &v * &s.center;
    if !problem.metric_inv.is_constant() {
        // c^nu = g^{-1/2} d_mu (g^{1/2} g^{mu nu})
        let root = sqrt_det_inv_metric(&g);
        let weighted = |p: &[f64]| {
            let gi = problem.metric_inv.eval(p);
            gi * sqrt_det_inv_metric(&problem.metric_inv.eval(p))
        };
        let mut c = vec![0.0; d];
        for mu in 0..d {
            let diff = (weighted(&shifted(mu, 1.0)) - weighted(&shifted(mu, -1.0))) / (2.0 * h);
            for nu in 0..d {
                c[nu] += diff[(mu, nu)] / root;
            }
        }
        for nu in 0..d {
            let covariant = &grad[nu] + &b[nu] * &s.center;
            result -= covariant * cx(c[nu]);
        }
    }
    result
}

/// `A f` at `z` from samples of `f` at `z + j (h / 2)` along the axes (and
/// the diagonals where `g^{mu nu}` has off-diagonal entries). Central
/// second-order differences at `h` and `h/2`, Richardson-combined when
/// `richardson` is set. The centre is sampled first.
pub(crate) fn apply_a_stencil<F>(problem: &LaplaceProblem, z: &[f64], h: f64, richardson: bool, mut f: F) -> Result<CMat>
where
    F: FnMut(&[f64]) -> Result<CMat>,
{
    let d = problem.dim;
    problem.check_point(z)?;
    for mu in 0..d {
        for sign in [-1.0, 1.0] {
            let mut p = z.to_vec();
            p[mu] += sign * h;
            if !problem.domain.contains(&p) {
                return Err(HeatError::OutOfChart { point: p });
            }
        }
    }
    let g = problem.metric_inv.eval(z);
    let mixed_pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|mu| (mu + 1..d).map(move |nu| (mu, nu)))
        .filter(|&(mu, nu)| g[(mu, nu)] != 0.0 || g[(nu, mu)] != 0.0)
        .collect();

    let half = 0.5 * h;
    let mut cache: HashMap<Vec<i64>, CMat> = HashMap::new();
    let mut sample = |offset: &[i64]| -> Result<CMat> {
        if let Some(v) = cache.get(offset) {
            return Ok(v.clone());
        }
        let point: Vec<f64> = z.iter().zip(offset).map(|(c, &o)| c + o as f64 * half).collect();
        let v = f(&point)?;
        cache.insert(offset.to_vec(), v.clone());
        Ok(v)
    };
    let zero = vec![0i64; d];
    let center_value = sample(&zero)?;

    let scales: &[i64] = if richardson { &[2, 1] } else { &[2] };
    let mut results = Vec::with_capacity(2);
    for &units in scales {
        let mut plus = Vec::with_capacity(d);
        let mut minus = Vec::with_capacity(d);
        for mu in 0..d {
            let mut o = zero.clone();
            o[mu] = units;
            plus.push(sample(&o)?);
            o[mu] = -units;
            minus.push(sample(&o)?);
        }
        let mut mixed = Vec::with_capacity(mixed_pairs.len());
        for &(mu, nu) in &mixed_pairs {
            let mut corner = |a: i64, b: i64| {
                let mut o = zero.clone();
                o[mu] = a * units;
                o[nu] = b * units;
                sample(&o)
            };
            mixed.push(((mu, nu), [corner(1, 1)?, corner(1, -1)?, corner(-1, 1)?, corner(-1, -1)?]));
        }
        let samples = Samples { center: center_value.clone(), plus, minus, mixed };
        results.push(operator_at(problem, z, units as f64 * half, &samples));
    }
    Ok(if richardson {
        (&results[1] * linalg::c(4.0) - &results[0]) * linalg::c(1.0 / 3.0)
    } else {
        results.pop().expect("one scale")
    })
}

/// Number of distinct stencil samples per operator application.
pub fn stencil_size(problem: &LaplaceProblem, richardson: bool, at: &[f64]) -> u64 {
    let d = problem.dim;
    let g = problem.metric_inv.eval(at);
    let mixed = (0..d).flat_map(|mu| (mu + 1..d).map(move |nu| (mu, nu))).filter(|&(mu, nu)| g[(mu, nu)] != 0.0).count();
    let per_scale = 2 * d + 4 * mixed;
    (1 + per_scale * if richardson { 2 } else { 1 }) as u64
}

/// `A f` at `x` for a field given pointwise, with the stencil width from the
/// settings (default `1e-3`).
pub fn apply_a<F>(problem: &LaplaceProblem, f: F, x: &[f64]) -> Result<CMat>
where
    F: Fn(&[f64]) -> CMat,
{
    let h = problem.settings.stencil_width.unwrap_or(1e-3);
    apply_a_with_width(problem, f, x, h)
}

pub fn apply_a_with_width<F>(problem: &LaplaceProblem, f: F, x: &[f64], h: f64) -> Result<CMat>
where
    F: Fn(&[f64]) -> CMat,
{
    apply_a_stencil(problem, x, h, problem.settings.richardson_stencil, |p| Ok(f(p)))
}

/// Seeley-DeWitt coefficients `a_0 .. a_K` for one endpoint pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdwTable {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub order: usize,
    #[serde(with = "linalg::serde_cmats")]
    pub coeffs: Vec<CMat>,
    pub stencil_width: f64,
    pub transport_tol: f64,
    /// Two-point evaluations spent, memo hits excluded.
    pub evaluations: u64,
}

/// Memoised recursion for a fixed base point `y`.
///
/// Evaluation is sequential, so the first request for a memo key, and hence
/// every stored value, is fixed by the inputs alone.
pub struct SdwEngine<'a> {
    problem: &'a LaplaceProblem,
    y: Vec<f64>,
    h: f64,
    steps_per_unit: usize,
    geo_steps: usize,
    straight: bool,
    coeffs: DashMap<(usize, Key), CMat>,
    root_delta: DashMap<Key, f64>,
    shots: DashMap<Key, Shot>,
    evaluations: AtomicU64,
    quad: QuadOptions,
}

impl<'a> SdwEngine<'a> {
    /// Engine for base point `y`; `x` sets the stencil width and transport grid.
    pub fn new(problem: &'a LaplaceProblem, x: &[f64], y: &[f64]) -> Result<Self> {
        problem.check_point(x)?;
        problem.check_point(y)?;
        let separation = LaplaceProblem::coordinate_distance(x, y);
        let mut engine = SdwEngine {
            problem,
            y: y.to_vec(),
            h: problem.settings.stencil_for(separation),
            steps_per_unit: 4,
            geo_steps: 4,
            straight: problem.metric_inv.is_constant(),
            coeffs: DashMap::new(),
            root_delta: DashMap::new(),
            shots: DashMap::new(),
            evaluations: AtomicU64::new(0),
            quad: QuadOptions { abs_tol: problem.settings.quad_tol, rel_tol: 1e-8, max_depth: 8 },
        };
        engine.size_grids(x)?;
        Ok(engine)
    }

    /// Fix the macro-step densities once, from the path to `x`, so that every
    /// endpoint map the recursion differentiates is smooth.
    fn size_grids(&mut self, x: &[f64]) -> Result<()> {
        let p = self.problem;
        let v0 = if self.straight {
            x.iter().zip(&self.y).map(|(a, b)| a - b).collect()
        } else {
            let shot = geometry::shoot(p, &self.y, x, None)?;
            self.geo_steps = shot.geodesic.macro_steps.max(4);
            shot.geodesic.initial_velocity.clone()
        };
        let constant_transport = self.straight && p.connection.iter().all(|b| b.is_constant());
        if !constant_transport && !p.connection_is_zero() {
            let geo = geometry::geodesic_ivp(p, &self.y, &v0)?;
            let ctl = Controller { min_steps: self.geo_steps, ..Controller::new(p.settings.ode_tol) };
            self.steps_per_unit = transport_steps(p, &geo, ctl)?.max(self.geo_steps);
        } else {
            self.steps_per_unit = self.geo_steps;
        }
        Ok(())
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn problem(&self) -> &LaplaceProblem {
        self.problem
    }

    pub fn stencil_width(&self) -> f64 {
        self.h
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Estimated two-point evaluations for orders up to `k`, one 15-point
    /// panel per transport integral.
    pub fn estimated_cost(&self, k: usize) -> u64 {
        let s = stencil_size(self.problem, self.problem.settings.richardson_stencil, &self.y);
        let per_point = if self.straight { 1 } else { 1 + 4 * self.problem.dim as u64 };
        let branch = 15 * s;
        let mut total = 0u64;
        let mut level = 1u64;
        for _ in 0..k {
            level = level.saturating_mul(branch);
            total = total.saturating_add(level);
        }
        total.saturating_mul(per_point)
    }

    /// Noise level of the order-`k` transport integrand: each operator
    /// application amplifies value noise by about `8 / h^2`. Values built
    /// from geodesic shooting carry the integrator tolerance.
    pub fn noise_floor(&self, k: usize) -> f64 {
        let base = if self.straight { 64.0 * f64::EPSILON } else { self.problem.settings.ode_tol };
        base * (8.0 / (self.h * self.h)).powi(k as i32)
    }

    fn charge(&self, n: u64) -> Result<()> {
        let used = self.evaluations.fetch_add(n, Ordering::Relaxed) + n;
        let budget = self.problem.settings.max_evals;
        if used > budget {
            return Err(HeatError::CostBudgetExceeded { estimated: used, budget });
        }
        Ok(())
    }

    fn shot(&self, x: &[f64], hint: Option<&ShootingStart>) -> Result<Shot> {
        let key = quantize(x);
        if let Some(s) = self.shots.get(&key) {
            return Ok(s.clone());
        }
        let fallback;
        let start = match hint {
            Some(h) => h,
            None => {
                fallback = ShootingStart {
                    velocity: x.iter().zip(&self.y).map(|(a, b)| a - b).collect(),
                    steps: self.geo_steps,
                    jacobian: None,
                };
                &fallback
            }
        };
        self.charge(1)?;
        let shot = geometry::shoot(self.problem, &self.y, x, Some(start))?;
        Ok(self.shots.entry(key).or_insert(shot).clone())
    }

    fn start_from(shot: &Shot, scale: f64) -> ShootingStart {
        ShootingStart {
            velocity: shot.geodesic.initial_velocity.iter().map(|v| v * scale).collect(),
            steps: shot.geodesic.macro_steps,
            jacobian: if scale == 1.0 { shot.jacobian.clone() } else { None },
        }
    }

    /// Initial velocity of the geodesic from `y` to `x`.
    fn velocity(&self, x: &[f64], hint: Option<&ShootingStart>) -> Result<Vec<f64>> {
        if self.straight {
            return Ok(x.iter().zip(&self.y).map(|(a, b)| a - b).collect());
        }
        Ok(self.shot(x, hint)?.geodesic.initial_velocity)
    }

    /// `Delta^{1/2}(x, y)`.
    fn root_delta(&self, x: &[f64], hint: Option<&ShootingStart>) -> Result<f64> {
        if self.straight {
            return Ok(1.0);
        }
        let key = quantize(x);
        if let Some(v) = self.root_delta.get(&key) {
            return Ok(*v);
        }
        let shot = self.shot(x, hint)?;
        self.charge(4 * self.problem.dim as u64)?;
        let delta = synge::van_vleck_from(self.problem, x, &self.y, &shot)?;
        Ok(*self.root_delta.entry(key).or_insert(delta.sqrt()))
    }

    /// `sigma(x, y)`.
    pub(crate) fn sigma(&self, x: &[f64]) -> Result<f64> {
        if self.straight {
            let g = self.problem.lower_metric(x)?;
            let u: Vec<f64> = x.iter().zip(&self.y).map(|(a, b)| a - b).collect();
            return Ok(0.5 * geometry::quadratic_form(&g, &u));
        }
        Ok(0.5 * self.shot(x, None)?.geodesic.energy)
    }

    pub(crate) fn delta(&self, x: &[f64]) -> Result<f64> {
        self.root_delta(x, None).map(|r| r * r)
    }

    /// `a_k(x, y)`.
    pub fn coefficient(&self, k: usize, x: &[f64]) -> Result<CMat> {
        self.coefficient_at(k, x, None)
    }

    pub(crate) fn coefficient_at(&self, k: usize, x: &[f64], hint: Option<&ShootingStart>) -> Result<CMat> {
        let key = (k, quantize(x));
        if let Some(v) = self.coeffs.get(&key) {
            return Ok(v.clone());
        }
        let value = if k == 0 { self.wilson(x, hint)? } else { self.transport(k, x, hint)? };
        Ok(self.coeffs.entry(key).or_insert(value).clone())
    }

    fn wilson(&self, x: &[f64], hint: Option<&ShootingStart>) -> Result<CMat> {
        let p = self.problem;
        if self.straight {
            self.charge(1)?;
        }
        let v0 = self.velocity(x, hint)?;
        if p.connection_is_zero() {
            return Ok(linalg::identity(p.fiber_dim));
        }
        let samples = geometry::transport_samples(p, &self.y, &v0, &[1.0], self.steps_per_unit)?;
        Ok(samples.into_iter().next().expect("one sample").transport)
    }

    /// `R_k(z) = -Delta^{-1/2} A (Delta^{1/2} a_k)` at `z`.
    pub(crate) fn source(&self, k: usize, z: &[f64], hint: Option<&ShootingStart>) -> Result<CMat> {
        let root = self.root_delta(z, hint)?;
        let center_start = if self.straight { None } else { Some(Self::start_from(&self.shot(z, hint)?, 1.0)) };
        let richardson = self.problem.settings.richardson_stencil;
        let applied = apply_a_stencil(self.problem, z, self.h, richardson, |w| {
            let h = center_start.as_ref();
            let r = self.root_delta(w, h)?;
            Ok(self.coefficient_at(k, w, h)? * linalg::c(r))
        })?;
        Ok(applied * linalg::c(-1.0 / root))
    }

    fn transport(&self, k: usize, x: &[f64], hint: Option<&ShootingStart>) -> Result<CMat> {
        let p = self.problem;
        let v0 = self.velocity(x, hint)?;
        let parent = if self.straight { None } else { Some(self.shot(x, hint)?) };
        let w1 = self.coefficient_at(0, x, hint)?;
        let integrand = |nodes: &[f64]| -> Result<Vec<CMat>> {
            let samples = geometry::transport_samples(p, &self.y, &v0, nodes, self.steps_per_unit)?;
            let mut out = Vec::with_capacity(nodes.len());
            for (&s, sample) in nodes.iter().zip(samples) {
                let child = parent.as_ref().map(|sh| Self::start_from(sh, s));
                let r = self.source(k - 1, &sample.position, child.as_ref())?;
                let w_inv = linalg::inverse(&sample.transport)
                    .ok_or_else(|| HeatError::InvalidProblem("singular transport matrix".into()))?;
                out.push(w_inv * r * linalg::c(s.powi(k as i32 - 1)));
            }
            Ok(out)
        };
        let opts = QuadOptions { abs_tol: self.quad.abs_tol.max(self.noise_floor(k)), ..self.quad };
        let (integral, _err) = quad::integrate_batched(&integrand, 0.0, 1.0, opts)?;
        Ok(w1 * integral)
    }

    /// Recurrence defect `(k + 1 + sigma^mu D_mu) a_{k+1} - R_k` at the
    /// point `gamma(lambda)` of the geodesic from `y` to `x`.
    pub fn recurrence_residual(&self, k: usize, x: &[f64], lambda: f64) -> Result<f64> {
        let p = self.problem;
        let d = p.dim;
        let v0 = self.velocity(x, None)?;
        let sample = geometry::transport_samples(p, &self.y, &v0, &[lambda], self.steps_per_unit)?.remove(0);
        let z = sample.position.clone();
        let hint = if self.straight { None } else { Some(Self::start_from(&self.shot(x, None)?, lambda)) };
        let a_next = self.coefficient_at(k + 1, &z, hint.as_ref())?;
        let b: Vec<CMat> = p.connection.iter().map(|f| f.eval(&z)).collect();
        // sigma^mu(gamma(lambda), y) = lambda gamma'(lambda)
        let sigma_up: Vec<f64> = sample.velocity.iter().map(|v| v * lambda).collect();
        let step = 0.5 * self.h;
        let mut transport = linalg::zeros(p.fiber_dim);
        for mu in 0..d {
            if sigma_up[mu] == 0.0 {
                continue;
            }
            let at = |units: f64| {
                let mut w = z.clone();
                w[mu] += units * step;
                self.coefficient_at(k + 1, &w, hint.as_ref())
            };
            let deriv = (at(-2.0)? - at(2.0)? + (at(1.0)? - at(-1.0)?) * linalg::c(8.0)) * linalg::c(1.0 / (12.0 * step));
            transport += (deriv + &b[mu] * &a_next) * linalg::c(sigma_up[mu]);
        }
        let lhs = &a_next * linalg::c((k + 1) as f64) + transport;
        let rhs = self.source(k, &z, hint.as_ref())?;
        Ok(linalg::frobenius_distance(&lhs, &rhs))
    }
}

fn transport_steps(problem: &LaplaceProblem, geo: &geometry::Geodesic, ctl: Controller) -> Result<usize> {
    let m = problem.fiber_dim;
    let d = problem.dim;
    let mut y0: Vec<f64> = geo.start.iter().chain(&geo.initial_velocity).copied().collect();
    let base = y0.len();
    y0.resize(base + 2 * m * m, 0.0);
    linalg::pack_into(&linalg::identity(m), &mut y0[base..]);
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = &y[..d];
        let v = &y[d..2 * d];
        let g = geometry::christoffel(problem, x).map_err(|_| HeatError::LeftChart { point: x.to_vec() })?;
        dy[..d].copy_from_slice(v);
        dy[d..2 * d].copy_from_slice(&g.acceleration(v));
        let w = linalg::unpack(m, &y[2 * d..]);
        let mut gen = linalg::zeros(m);
        for (mu, b) in problem.connection.iter().enumerate() {
            gen += b.eval(x) * Complex64::new(v[mu], 0.0);
        }
        linalg::pack_into(&(-(gen * w)), &mut dy[2 * d..]);
        Ok(())
    };
    Ok(ode::integrate(&rhs, 0.0, 1.0, &y0, ctl)?.steps)
}

/// `a_0(x, y)`: the Wilson line along the geodesic from `y` to `x`.
pub fn a0(problem: &LaplaceProblem, x: &[f64], y: &[f64]) -> Result<CMat> {
    let geo = geometry::geodesic_bvp(problem, y, x)?;
    geometry::wilson_line(problem, &geo)
}

/// `a_0 .. a_K` at `(x, y)` by the transport recursion.
pub fn sdw_coefficients(problem: &LaplaceProblem, x: &[f64], y: &[f64], order: usize) -> Result<SdwTable> {
    let engine = SdwEngine::new(problem, x, y)?;
    let estimated = engine.estimated_cost(order);
    if estimated > problem.settings.max_evals {
        return Err(HeatError::CostBudgetExceeded { estimated, budget: problem.settings.max_evals });
    }
    let coeffs = (0..=order).map(|k| engine.coefficient(k, x)).collect::<Result<Vec<_>>>()?;
    Ok(SdwTable {
        x: x.to_vec(),
        y: y.to_vec(),
        order,
        coeffs,
        stencil_width: engine.stencil_width(),
        transport_tol: engine.quad.rel_tol,
        evaluations: engine.evaluations(),
    })
}

/// Unit direction used to approach the diagonal.
pub fn diagonal_direction(dim: usize) -> Vec<f64> {
    vec![1.0 / (dim as f64).sqrt(); dim]
}

/// `a_k(x, x)`: values at `y = x + eps u` for `eps = eps0` and `eps0 / 2`,
/// extrapolated linearly to `eps = 0`.
pub fn sdw_diagonal(problem: &LaplaceProblem, x: &[f64], order: usize) -> Result<Vec<CMat>> {
    let eps = problem.settings.diag_eps;
    let u = diagonal_direction(problem.dim);
    let at = |e: f64| -> Result<Vec<CMat>> {
        let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + e * b).collect();
        sdw_coefficients(problem, x, &y, order).map(|t| t.coeffs)
    };
    let coarse = at(eps)?;
    let fine = at(0.5 * eps)?;
    Ok(coarse.iter().zip(&fine).map(|(c, f)| f * linalg::c(2.0) - c).collect())
}

/// Largest recurrence defect for `k < K` at `lambda` in `{0.5, 1}`.
pub fn recurrence_residual(problem: &LaplaceProblem, x: &[f64], y: &[f64], order: usize) -> Result<f64> {
    let engine = SdwEngine::new(problem, x, y)?;
    let mut worst = 0.0_f64;
    for k in 0..order {
        for lambda in [0.5, 1.0] {
            worst = worst.max(engine.recurrence_residual(k, x, lambda)?);
        }
    }
    Ok(worst)
}

/// Two-point data needed by the `Psi_k` family, for a fixed base point `y`.
pub trait TwoPointSource: Sync {
    fn problem(&self) -> &LaplaceProblem;
    fn base(&self) -> &[f64];
    /// Operator stencil width for derivatives in `x`.
    fn stencil_width(&self) -> f64;
    fn sigma(&self, x: &[f64]) -> Result<f64>;
    fn van_vleck(&self, x: &[f64]) -> Result<f64>;
    /// `a_0 .. a_n` at `(x, y)`.
    fn coefficients(&self, x: &[f64], n: usize) -> Result<Vec<CMat>>;
}

/// Coefficients from the transport recursion.
pub struct NumericSource<'a> {
    engine: SdwEngine<'a>,
}

impl<'a> NumericSource<'a> {
    pub fn new(problem: &'a LaplaceProblem, x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(NumericSource { engine: SdwEngine::new(problem, x, y)? })
    }
}

impl TwoPointSource for NumericSource<'_> {
    fn problem(&self) -> &LaplaceProblem {
        self.engine.problem
    }
    fn base(&self) -> &[f64] {
        &self.engine.y
    }
    fn stencil_width(&self) -> f64 {
        self.engine.stencil_width()
    }
    fn sigma(&self, x: &[f64]) -> Result<f64> {
        self.engine.sigma(x)
    }
    fn van_vleck(&self, x: &[f64]) -> Result<f64> {
        self.engine.delta(x)
    }
    fn coefficients(&self, x: &[f64], n: usize) -> Result<Vec<CMat>> {
        (0..=n).map(|k| self.engine.coefficient_at(k, x, None)).collect()
    }
}

/// Exact coefficients for a constant metric with constant connection and
/// potential that all commute: `a_n = exp(-(x - y)^mu B_mu) v^n / n!`,
/// `Delta = 1`, `sigma = (x - y) g (x - y) / 2`.
pub struct ClosedFormSource<'a> {
    problem: &'a LaplaceProblem,
    y: Vec<f64>,
    g_lower: DMatrix<f64>,
    h: f64,
}

impl<'a> ClosedFormSource<'a> {
    pub fn applies(problem: &LaplaceProblem) -> bool {
        if !problem.metric_inv.is_constant() || !problem.potential.is_constant() {
            return false;
        }
        if !problem.connection.iter().all(|b| b.is_constant()) {
            return false;
        }
        let origin = vec![0.0; problem.dim];
        let mut fields: Vec<CMat> = problem.connection.iter().map(|b| b.eval(&origin)).collect();
        fields.push(problem.potential.eval(&origin));
        fields.iter().all(|a| fields.iter().all(|b| linalg::commutes(a, b, 1e-14)))
    }

    pub fn new(problem: &'a LaplaceProblem, x: &[f64], y: &[f64]) -> Result<Self> {
        if !Self::applies(problem) {
            return Err(HeatError::InvalidProblem("closed-form coefficients need constant commuting fields".into()));
        }
        problem.check_point(y)?;
        let h = problem.settings.stencil_for(LaplaceProblem::coordinate_distance(x, y));
        Ok(ClosedFormSource { problem, y: y.to_vec(), g_lower: problem.lower_metric(y)?, h })
    }
}

impl TwoPointSource for ClosedFormSource<'_> {
    fn problem(&self) -> &LaplaceProblem {
        self.problem
    }
    fn base(&self) -> &[f64] {
        &self.y
    }
    fn stencil_width(&self) -> f64 {
        self.h
    }
    fn sigma(&self, x: &[f64]) -> Result<f64> {
        let u: Vec<f64> = x.iter().zip(&self.y).map(|(a, b)| a - b).collect();
        Ok(0.5 * geometry::quadratic_form(&self.g_lower, &u))
    }
    fn van_vleck(&self, _x: &[f64]) -> Result<f64> {
        Ok(1.0)
    }
    fn coefficients(&self, x: &[f64], n: usize) -> Result<Vec<CMat>> {
        let p = self.problem;
        let m = p.fiber_dim;
        let mut gen = linalg::zeros(m);
        for (mu, b) in p.connection.iter().enumerate() {
            gen -= b.eval(x) * linalg::c(x[mu] - self.y[mu]);
        }
        let v = p.potential.eval(x);
        let mut term = linalg::expm(&gen);
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..=n {
            if k > 0 {
                term = &term * &v * linalg::c(1.0 / k as f64);
            }
            out.push(term.clone());
        }
        Ok(out)
    }
}

/// Closed-form coefficients when they apply, the transport recursion otherwise.
pub fn two_point_source<'a>(problem: &'a LaplaceProblem, x: &[f64], y: &[f64]) -> Result<Box<dyn TwoPointSource + 'a>> {
    if ClosedFormSource::applies(problem) {
        Ok(Box::new(ClosedFormSource::new(problem, x, y)?))
    } else {
        Ok(Box::new(NumericSource::new(problem, x, y)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn scalar(a: &CMat) -> f64 {
        a[(0, 0)].re
    }

    #[test]
    fn apply_a_examples() {
        let c = 0.7;
        let p = presets::constant_potential(2, c);
        let r = apply_a(&p, |_| linalg::identity(1), &[0.3, 0.2]).unwrap();
        assert!((scalar(&r) + c).abs() < 1e-12);

        let flat = presets::flat(2);
        let r = apply_a(&flat, |x| linalg::scalar(1, linalg::c(x[0] * x[0])), &[0.4, -0.1]).unwrap();
        assert!((scalar(&r) + 2.0).abs() < 1e-6);

        // -d^2 exp(-|x|^2 / 4 tau) at 0 is d / (2 tau)
        let tau = 0.5;
        let r = apply_a(&flat, |x| linalg::scalar(1, linalg::c((-(x[0] * x[0] + x[1] * x[1]) / (4.0 * tau)).exp())), &[0.0, 0.0])
            .unwrap();
        assert!((scalar(&r) - 2.0 / (2.0 * tau)).abs() < 1e-6, "{r}");
    }

    #[test]
    fn apply_a_polar_matches_cartesian_laplacian() {
        // f = X^2 Y in Cartesian, -Lap f = -2Y; in polar (r, th): f = r^3 cos^2 sin
        let p = presets::polar_flat(0.0);
        let f = |q: &[f64]| {
            let (r, t) = (q[0], q[1]);
            linalg::scalar(1, linalg::c(r.powi(3) * t.cos().powi(2) * t.sin()))
        };
        let at = [1.5, 0.6];
        let r = apply_a(&p, f, &at).unwrap();
        let yy = at[0] * at[1].sin();
        assert!((scalar(&r) + 2.0 * yy).abs() < 1e-6, "{r}");
    }

    #[test]
    fn apply_a_out_of_chart() {
        let flat = presets::flat(1);
        let edge = presets::CARTESIAN_HALF_WIDTH - 1e-4;
        assert!(matches!(apply_a(&flat, |_| linalg::identity(1), &[edge]), Err(HeatError::OutOfChart { .. })));
    }

    #[test]
    fn constant_potential_coefficients() {
        let c = 1.0;
        let p = presets::constant_potential(1, c);
        let t = sdw_coefficients(&p, &[0.4], &[0.1], 3).unwrap();
        let expected = [1.0, 1.0, 0.5, 1.0 / 6.0];
        for (a, e) in t.coeffs.iter().zip(expected) {
            assert!((scalar(a) - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn a0_column_matches_a0() {
        let p = presets::nonabelian_constant(0.6, 0.9, 0.3);
        let (x, y) = ([0.5, -0.2], [-0.1, 0.3]);
        let t = sdw_coefficients(&p, &x, &y, 0).unwrap();
        let w = a0(&p, &x, &y).unwrap();
        assert!(linalg::frobenius_distance(&t.coeffs[0], &w) < 10.0 * p.settings.ode_tol);
        assert_eq!(a0(&p, &x, &x).unwrap(), linalg::identity(2));
    }

    #[test]
    fn abelian_a0() {
        let xi = [0.3, -0.8];
        let p = presets::constant_abelian(&xi, 0.0);
        let (x, y) = ([0.5, 0.4], [-0.2, 0.1]);
        let w = a0(&p, &x, &y).unwrap();
        let expected = (-((x[0] - y[0]) * xi[0] + (x[1] - y[1]) * xi[1])).exp();
        assert!((scalar(&w) - expected).abs() < 1e-12);
    }

    #[test]
    fn harmonic_a1_on_the_diagonal() {
        let p = presets::harmonic(1, 1.0);
        let diag = sdw_diagonal(&p, &[0.7], 1).unwrap();
        assert!((scalar(&diag[0]) - 1.0).abs() < 1e-12);
        assert!((scalar(&diag[1]) + 0.49).abs() < 1e-6, "{}", diag[1]);
    }

    #[test]
    fn harmonic_a2_at_origin() {
        // oracle: tau^2 coefficient of the Mehler kernel, -omega^2 / 3
        let p = presets::harmonic(1, 1.0);
        let diag = sdw_diagonal(&p, &[0.0], 2).unwrap();
        assert!(scalar(&diag[1]).abs() < 1e-6);
        assert!((scalar(&diag[2]) + 1.0 / 3.0).abs() < 1e-6, "{}", diag[2]);
    }

    #[test]
    fn recurrence_holds_for_harmonic() {
        let p = presets::harmonic(1, 1.0);
        let r = recurrence_residual(&p, &[0.3], &[0.1], 2).unwrap();
        assert!(r < p.settings.recur_tol, "{r}");
    }

    #[test]
    fn cost_budget_is_enforced() {
        let mut p = presets::nonabelian_constant(0.6, 0.9, 0.3);
        p.settings.max_evals = 1000;
        let err = sdw_coefficients(&p, &[0.3, 0.1], &[0.0, 0.0], 2).unwrap_err();
        assert!(matches!(err, HeatError::CostBudgetExceeded { .. }));
    }

    #[test]
    fn closed_form_matches_recursion() {
        let p = presets::abelian_phase(&[0.4, -0.3], 0.8);
        let (x, y) = ([0.3, 0.2], [-0.1, 0.1]);
        let cf = ClosedFormSource::new(&p, &x, &y).unwrap().coefficients(&x, 2).unwrap();
        let t = sdw_coefficients(&p, &x, &y, 2).unwrap();
        for (a, b) in cf.iter().zip(&t.coeffs) {
            assert!(linalg::frobenius_distance(a, b) < 1e-7, "{a} vs {b}");
        }
        assert!(!ClosedFormSource::applies(&presets::nonabelian_constant(0.6, 0.9, 0.3)));
        assert!(!ClosedFormSource::applies(&presets::harmonic(1, 1.0)));
    }

    #[test]
    fn lattice_roundtrip() {
        let k = quantize(&[0.123456789012345, -3.3]);
        assert_eq!(quantize(&lattice_point(&k)), k);
    }
}
