//! Chart-local geometry: the Laplace-type problem, metric data, Christoffel
//! symbols, geodesics and parallel transport in the gauge bundle.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HeatError, Result};
use crate::linalg::{self, CMat};
use crate::ode::{self, Controller};

pub type Point = Vec<f64>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;
pub type MetricFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Numerical knobs shared by every operation on a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub ode_tol: f64,
    pub bvp_tol: f64,
    pub max_newton: usize,
    /// Metric-derivative step; `None` means `1e-4` times the chart diameter.
    pub fd_step: Option<f64>,
    /// Van Vleck difference step; `None` means `1e-3 |x - y|` clamped to `[1e-5, 1e-2]`.
    pub vv_step: Option<f64>,
    /// Operator stencil width; `None` means `0.1 |x - y|` clamped to `[1e-3, 5e-2]`.
    pub stencil_width: Option<f64>,
    /// Richardson-combine the stencil at `h` and `h/2` (fourth order).
    pub richardson_stencil: bool,
    pub quad_tol: f64,
    pub max_evals: u64,
    pub recur_tol: f64,
    pub sym_tol: f64,
    pub diag_eps: f64,
    pub k_max: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            ode_tol: 1e-10,
            bvp_tol: 1e-8,
            max_newton: 50,
            fd_step: None,
            vv_step: None,
            stencil_width: None,
            richardson_stencil: true,
            quad_tol: 1e-10,
            max_evals: 1_000_000,
            recur_tol: 1e-4,
            sym_tol: 1e-6,
            diag_eps: 1e-3,
            k_max: 3,
        }
    }
}

impl Settings {
    pub fn stencil_for(&self, separation: f64) -> f64 {
        self.stencil_width.unwrap_or_else(|| (0.1 * separation).clamp(1e-3, 5e-2))
    }

    pub fn vv_step_for(&self, separation: f64) -> f64 {
        self.vv_step.unwrap_or_else(|| (1e-3 * separation).clamp(1e-5, 1e-2))
    }
}

/// Axis-aligned box on which the fields are declared valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ChartBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(HeatError::DimensionMismatch { expected: lower.len(), found: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(HeatError::InvalidProblem("chart box needs lower < upper on every axis".into()));
        }
        Ok(ChartBox { lower, upper })
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        ChartBox { lower: vec![-half_width; dim], upper: vec![half_width; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_with_margin(x, 0.0)
    }

    pub fn contains_with_margin(&self, x: &[f64], margin: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| v.is_finite() && *v >= lo + margin && *v <= hi - margin)
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    /// `n` points per axis, inclusive of the faces.
    pub fn grid(&self, n: usize) -> Vec<Point> {
        let d = self.dim();
        let n = n.max(2);
        let total = n.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|axis| {
                        let i = idx % n;
                        idx /= n;
                        let t = i as f64 / (n - 1) as f64;
                        self.lower[axis] + t * (self.upper[axis] - self.lower[axis])
                    })
                    .collect()
            })
            .collect()
    }
}

/// m x m complex matrix field on the chart.
#[derive(Clone)]
pub enum MatrixField {
    Zero { m: usize },
    Constant(CMat),
    Varying { m: usize, f: MatrixFn },
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::Zero { m } => write!(f, "Zero({m})"),
            MatrixField::Constant(c) => write!(f, "Constant({c})"),
            MatrixField::Varying { m, .. } => write!(f, "Varying({m})"),
        }
    }
}

impl MatrixField {
    pub fn varying(m: usize, f: impl Fn(&[f64]) -> CMat + Send + Sync + 'static) -> Self {
        MatrixField::Varying { m, f: Arc::new(f) }
    }

    /// Scalar field times the m x m identity.
    pub fn scalar(m: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        MatrixField::varying(m, move |x| linalg::scalar(m, Complex64::new(f(x), 0.0)))
    }

    pub fn fiber_dim(&self) -> usize {
        match self {
            MatrixField::Zero { m } | MatrixField::Varying { m, .. } => *m,
            MatrixField::Constant(c) => c.nrows(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> CMat {
        match self {
            MatrixField::Zero { m } => linalg::zeros(*m),
            MatrixField::Constant(c) => c.clone(),
            MatrixField::Varying { f, .. } => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MatrixField::Zero { .. })
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, MatrixField::Varying { .. })
    }

    /// `x -> alpha * F(scale * x + shift)`
    pub fn rescaled(&self, alpha: f64, scale: f64, shift: &[f64]) -> Self {
        let a = Complex64::new(alpha, 0.0);
        match self {
            MatrixField::Zero { m } => MatrixField::Zero { m: *m },
            MatrixField::Constant(c) => MatrixField::Constant(c * a),
            MatrixField::Varying { m, f } => {
                let f = f.clone();
                let shift = shift.to_vec();
                MatrixField::varying(*m, move |x| {
                    let z: Vec<f64> = x.iter().zip(&shift).map(|(xi, s)| scale * xi + s).collect();
                    f(&z) * a
                })
            }
        }
    }
}

/// Inverse metric `g^{mu nu}(x)`.
#[derive(Clone)]
pub enum MetricField {
    Constant(DMatrix<f64>),
    Varying { dim: usize, f: MetricFn },
}

impl fmt::Debug for MetricField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricField::Constant(c) => write!(f, "Constant({c})"),
            MetricField::Varying { dim, .. } => write!(f, "Varying({dim})"),
        }
    }
}

impl MetricField {
    pub fn euclidean(dim: usize) -> Self {
        MetricField::Constant(DMatrix::identity(dim, dim))
    }

    pub fn varying(dim: usize, f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        MetricField::Varying { dim, f: Arc::new(f) }
    }

    pub fn dim(&self) -> usize {
        match self {
            MetricField::Constant(c) => c.nrows(),
            MetricField::Varying { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            MetricField::Constant(c) => c.clone(),
            MetricField::Varying { f, .. } => f(x),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MetricField::Constant(_))
    }
}

/// Chart-local data of `A = -g^{-1/2} D_mu g^{1/2} g^{mu nu} D_nu - v`.
#[derive(Debug, Clone)]
pub struct LaplaceProblem {
    pub name: String,
    pub dim: usize,
    pub fiber_dim: usize,
    pub metric_inv: MetricField,
    pub connection: Vec<MatrixField>,
    pub potential: MatrixField,
    pub domain: ChartBox,
    pub settings: Settings,
}

impl LaplaceProblem {
    /// Builds and validates a problem: `g^{mu nu}` must be symmetric positive
    /// definite, `v` Hermitian and every field finite on a sample grid.
    pub fn new(
        name: impl Into<String>,
        metric_inv: MetricField,
        connection: Vec<MatrixField>,
        potential: MatrixField,
        domain: ChartBox,
    ) -> Result<Self> {
        let dim = domain.dim();
        if dim == 0 {
            return Err(HeatError::InvalidProblem("dimension must be positive".into()));
        }
        if metric_inv.dim() != dim {
            return Err(HeatError::DimensionMismatch { expected: dim, found: metric_inv.dim() });
        }
        if connection.len() != dim {
            return Err(HeatError::DimensionMismatch { expected: dim, found: connection.len() });
        }
        let fiber_dim = potential.fiber_dim();
        if fiber_dim == 0 {
            return Err(HeatError::InvalidProblem("fibre dimension must be positive".into()));
        }
        if let Some(bad) = connection.iter().find(|b| b.fiber_dim() != fiber_dim) {
            return Err(HeatError::DimensionMismatch { expected: fiber_dim, found: bad.fiber_dim() });
        }
        let problem = LaplaceProblem {
            name: name.into(),
            dim,
            fiber_dim,
            metric_inv,
            connection,
            potential,
            domain,
            settings: Settings::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_settings(mut self, settings: Settings) -> Self {
        self.settings = settings;
        self
    }

    fn validate(&self) -> Result<()> {
        let per_axis = match self.dim {
            1 => 9,
            2 => 7,
            3 => 5,
            _ => 3,
        };
        for x in self.domain.grid(per_axis) {
            let g = self.metric_inv.eval(&x);
            if g.nrows() != self.dim || g.ncols() != self.dim {
                return Err(HeatError::InvalidProblem(format!("metric has shape {}x{}", g.nrows(), g.ncols())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(HeatError::InvalidProblem(format!("metric is not finite at {x:?}")));
            }
            if (&g - g.transpose()).amax() > 1e-12 * (1.0 + g.amax()) {
                return Err(HeatError::InvalidProblem(format!("metric is not symmetric at {x:?}")));
            }
            if g.clone().cholesky().is_none() {
                return Err(HeatError::InvalidProblem(format!("metric is not positive definite at {x:?}")));
            }
            for (mu, b) in self.connection.iter().enumerate() {
                let bm = b.eval(&x);
                if bm.nrows() != self.fiber_dim || bm.ncols() != self.fiber_dim {
                    return Err(HeatError::InvalidProblem(format!("B_{mu} has the wrong shape")));
                }
                if bm.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(HeatError::InvalidProblem(format!("B_{mu} is not finite at {x:?}")));
                }
            }
            let v = self.potential.eval(&x);
            if v.nrows() != self.fiber_dim || v.ncols() != self.fiber_dim {
                return Err(HeatError::InvalidProblem("potential has the wrong shape".into()));
            }
            if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(HeatError::InvalidProblem(format!("potential is not finite at {x:?}")));
            }
            if !linalg::is_hermitian(&v, 1e-10) {
                return Err(HeatError::InvalidProblem(format!("potential is not Hermitian at {x:?}")));
            }
        }
        Ok(())
    }

    pub fn fd_step(&self) -> f64 {
        self.settings.fd_step.unwrap_or(1e-4 * self.domain.diameter())
    }

    pub fn connection_is_zero(&self) -> bool {
        self.connection.iter().all(MatrixField::is_zero)
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(HeatError::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        if !self.domain.contains(x) {
            return Err(HeatError::OutOfChart { point: x.to_vec() });
        }
        Ok(())
    }

    /// `g_{mu nu}(x)` via Cholesky; no conditioning check.
    pub(crate) fn lower_metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.metric_inv.eval(x);
        g.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| HeatError::SingularMetric { point: x.to_vec(), condition: f64::INFINITY })
    }

    #[cfg(test)]
    pub(crate) fn connection_at(&self, x: &[f64]) -> Vec<CMat> {
        self.connection.iter().map(|b| b.eval(x)).collect()
    }

    /// Euclidean coordinate distance, used to size difference steps.
    pub fn coordinate_distance(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// `g^{mu nu}`, `g_{mu nu}`, `det g_{mu nu}` and its square root.
#[derive(Debug, Clone)]
pub struct MetricPack {
    pub inverse: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub det: f64,
    pub sqrt_det: f64,
}

pub fn metric_pack(problem: &LaplaceProblem, x: &[f64]) -> Result<MetricPack> {
    problem.check_point(x)?;
    let inverse = problem.metric_inv.eval(x);
    let eig = SymmetricEigen::new(inverse.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= 1e12) {
        return Err(HeatError::SingularMetric { point: x.to_vec(), condition });
    }
    let lower = problem.lower_metric(x)?;
    let det = eig.eigenvalues.iter().map(|l| 1.0 / l).product::<f64>();
    Ok(MetricPack { inverse, lower, det, sqrt_det: det.sqrt() })
}

/// Fourth-order central difference of a matrix-valued map, Richardson
/// refined once (`h` and `h/2`).
pub(crate) fn central_derivative<F>(f: F, x: &[f64], axis: usize, h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let at = |offset: f64| {
        let mut p = x.to_vec();
        p[axis] += offset;
        f(&p)
    };
    let d4 = |h: f64| (at(-2.0 * h) - at(2.0 * h) + (at(h) - at(-h)) * 8.0) / (12.0 * h);
    (d4(0.5 * h) * 16.0 - d4(h)) / 15.0
}

/// Christoffel symbols of the second kind, `Gamma^l_{m n}` at `data[(l*d + m)*d + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn get(&self, l: usize, m: usize, n: usize) -> f64 {
        self.data[(l * self.dim + m) * self.dim + n]
    }

    /// `-Gamma^l_{m n} v^m v^n`
    pub fn acceleration(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|l| {
                let mut acc = 0.0;
                for m in 0..d {
                    for n in 0..d {
                        acc += self.get(l, m, n) * v[m] * v[n];
                    }
                }
                -acc
            })
            .collect()
    }
}

pub fn christoffel(problem: &LaplaceProblem, x: &[f64]) -> Result<Christoffel> {
    let d = problem.dim;
    problem.check_point(x)?;
    if problem.metric_inv.is_constant() {
        return Ok(Christoffel { dim: d, data: vec![0.0; d * d * d] });
    }
    let h = problem.fd_step();
    if !problem.domain.contains_with_margin(x, 2.0 * h) {
        return Err(HeatError::OutOfChart { point: x.to_vec() });
    }
    let g_inv = problem.metric_inv.eval(x);
    let g = problem.lower_metric(x)?;
    // d_rho g_{mu nu} = -g_{mu a} (d_rho g^{ab}) g_{b nu}
    let dg: Vec<DMatrix<f64>> = (0..d)
        .map(|rho| {
            let d_inv = central_derivative(|p| problem.metric_inv.eval(p), x, rho, h);
            -(&g * d_inv * &g)
        })
        .collect();
    let mut data = vec![0.0; d * d * d];
    for l in 0..d {
        for m in 0..d {
            for n in m..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += g_inv[(l, r)] * (dg[m][(r, n)] + dg[n][(r, m)] - dg[r][(m, n)]);
                }
                data[(l * d + m) * d + n] = 0.5 * acc;
                data[(l * d + n) * d + m] = 0.5 * acc;
            }
        }
    }
    Ok(Christoffel { dim: d, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub lambda: f64,
    pub position: Point,
    pub velocity: Vec<f64>,
}

/// Affinely parametrised geodesic `gamma: [0, 1] -> chart`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geodesic {
    pub start: Point,
    pub end: Point,
    pub initial_velocity: Vec<f64>,
    pub knots: Vec<Knot>,
    /// `int_0^1 g_{mu nu} gamma'^mu gamma'^nu d lambda`
    pub energy: f64,
    pub macro_steps: usize,
}

impl Geodesic {
    pub fn final_velocity(&self) -> &[f64] {
        &self.knots.last().expect("geodesic has knots").velocity
    }

    pub fn is_degenerate(&self) -> bool {
        self.initial_velocity.iter().all(|v| *v == 0.0)
    }

    /// The same curve traversed from `end` to `start`.
    pub fn reversed(&self) -> Geodesic {
        let knots = self
            .knots
            .iter()
            .rev()
            .map(|k| Knot {
                lambda: 1.0 - k.lambda,
                position: k.position.clone(),
                velocity: k.velocity.iter().map(|v| -v).collect(),
            })
            .collect();
        Geodesic {
            start: self.end.clone(),
            end: self.start.clone(),
            initial_velocity: self.final_velocity().iter().map(|v| -v).collect(),
            knots,
            energy: self.energy,
            macro_steps: self.macro_steps,
        }
    }

    /// Largest relative deviation of `g(gamma) gamma' gamma'` from the energy.
    pub fn energy_drift(&self, problem: &LaplaceProblem) -> Result<f64> {
        if self.energy == 0.0 {
            return Ok(0.0);
        }
        let mut worst = 0.0_f64;
        for k in &self.knots {
            let e = quadratic_form(&problem.lower_metric(&k.position)?, &k.velocity);
            worst = worst.max((e - self.energy).abs() / self.energy.abs());
        }
        Ok(worst)
    }
}

pub(crate) fn quadratic_form(g: &DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    (v.transpose() * g * &v)[(0, 0)]
}

fn geodesic_rhs(problem: &LaplaceProblem) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync + '_ {
    let d = problem.dim;
    move |_t, y, dy| {
        let (x, v) = y.split_at(d);
        let gamma = christoffel(problem, x).map_err(|_| HeatError::LeftChart { point: x.to_vec() })?;
        dy[..d].copy_from_slice(v);
        dy[d..2 * d].copy_from_slice(&gamma.acceleration(v));
        Ok(())
    }
}

fn build_geodesic(problem: &LaplaceProblem, x0: &[f64], v0: &[f64], sol: &ode::Solution) -> Result<Geodesic> {
    let d = problem.dim;
    let knots: Vec<Knot> = sol
        .knots
        .iter()
        .map(|(t, s)| Knot { lambda: *t, position: s[..d].to_vec(), velocity: s[d..2 * d].to_vec() })
        .collect();
    if let Some(bad) = knots.iter().find(|k| !problem.domain.contains(&k.position)) {
        return Err(HeatError::LeftChart { point: bad.position.clone() });
    }
    let energy = quadratic_form(&problem.lower_metric(x0)?, v0);
    Ok(Geodesic {
        start: x0.to_vec(),
        end: knots.last().expect("knots").position.clone(),
        initial_velocity: v0.to_vec(),
        knots,
        energy,
        macro_steps: sol.steps,
    })
}

fn controller(problem: &LaplaceProblem) -> Controller {
    Controller::new(problem.settings.ode_tol)
}

/// Integrate the geodesic equation from `x0` with velocity `v0` over `[0, 1]`.
pub fn geodesic_ivp(problem: &LaplaceProblem, x0: &[f64], v0: &[f64]) -> Result<Geodesic> {
    problem.check_point(x0)?;
    if v0.len() != problem.dim {
        return Err(HeatError::DimensionMismatch { expected: problem.dim, found: v0.len() });
    }
    let y0: Vec<f64> = x0.iter().chain(v0).copied().collect();
    let rhs = geodesic_rhs(problem);
    let sol = ode::integrate(&rhs, 0.0, 1.0, &y0, controller(problem))?;
    build_geodesic(problem, x0, v0, &sol)
}

fn ivp_fixed(problem: &LaplaceProblem, x0: &[f64], v0: &[f64], steps: usize) -> Result<ode::Solution> {
    let y0: Vec<f64> = x0.iter().chain(v0).copied().collect();
    let rhs = geodesic_rhs(problem);
    let sol = ode::integrate_fixed(&rhs, 0.0, 1.0, &y0, steps)?;
    let end = &sol.last()[..problem.dim];
    if !problem.domain.contains(end) {
        return Err(HeatError::LeftChart { point: end.to_vec() });
    }
    Ok(sol)
}

/// Warm start for the shooting method.
#[derive(Debug, Clone)]
pub(crate) struct ShootingStart {
    pub velocity: Vec<f64>,
    pub steps: usize,
    pub jacobian: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Shot {
    pub geodesic: Geodesic,
    pub jacobian: Option<DMatrix<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Geodesic from `y` to `x` by shooting on the initial velocity.
pub fn geodesic_bvp(problem: &LaplaceProblem, y: &[f64], x: &[f64]) -> Result<Geodesic> {
    shoot(problem, y, x, None).map(|s| s.geodesic)
}

pub(crate) fn shoot(problem: &LaplaceProblem, y: &[f64], x: &[f64], start: Option<&ShootingStart>) -> Result<Shot> {
    problem.check_point(y)?;
    problem.check_point(x)?;
    let d = problem.dim;
    let tol = problem.settings.bvp_tol;
    if LaplaceProblem::coordinate_distance(x, y) < 1e-12 {
        let rest = Knot { lambda: 0.0, position: y.to_vec(), velocity: vec![0.0; d] };
        let end = Knot { lambda: 1.0, ..rest.clone() };
        return Ok(Shot {
            geodesic: Geodesic {
                start: y.to_vec(),
                end: y.to_vec(),
                initial_velocity: vec![0.0; d],
                knots: vec![rest, end],
                energy: 0.0,
                macro_steps: 1,
            },
            jacobian: None,
        });
    }

    let mut v: Vec<f64> = match start {
        Some(s) => s.velocity.clone(),
        None => x.iter().zip(y).map(|(a, b)| a - b).collect(),
    };
    let mut steps = match start {
        Some(s) => s.steps,
        None => {
            // Let the controller size the grid at the initial guess.
            let y0: Vec<f64> = y.iter().chain(&v).copied().collect();
            let rhs = geodesic_rhs(problem);
            match ode::integrate(&rhs, 0.0, 1.0, &y0, controller(problem)) {
                Ok(sol) => sol.steps,
                Err(HeatError::OdeTolerance { .. }) => return Err(HeatError::NoConvergence { iterations: 0, residual: f64::INFINITY }),
                Err(_) => controller(problem).min_steps,
            }
        }
    };
    let mut jac = start.and_then(|s| s.jacobian.clone());

    let residual_of = |sol: &ode::Solution| -> Vec<f64> {
        sol.last()[..d].iter().zip(x).map(|(a, b)| a - b).collect()
    };
    let fail = |iterations: usize, residual: f64| HeatError::NoConvergence { iterations, residual };

    let mut sol = match ivp_fixed(problem, y, &v, steps) {
        Ok(s) => s,
        Err(_) => {
            // Shrink the guess until the trajectory stays in the chart.
            let mut scale = 0.5;
            loop {
                let trial: Vec<f64> = v.iter().map(|c| c * scale).collect();
                if let Ok(s) = ivp_fixed(problem, y, &trial, steps) {
                    v = trial;
                    break s;
                }
                scale *= 0.5;
                if scale < 1e-3 {
                    return Err(fail(0, f64::INFINITY));
                }
            }
        }
    };
    let mut f = residual_of(&sol);
    let mut r = norm(&f);
    let floor = 4.0 * f64::EPSILON * (1.0 + norm(x));
    let mut polish = 0;
    let mut iterations = 0;

    loop {
        if r < tol {
            if sol.error_estimate > problem.settings.ode_tol && steps * 2 <= controller(problem).max_steps {
                steps *= 2;
                sol = ivp_fixed(problem, y, &v, steps).map_err(|_| fail(iterations, r))?;
                f = residual_of(&sol);
                r = norm(&f);
                jac = None;
                continue;
            }
            if r <= floor || polish >= 4 {
                break;
            }
            polish += 1;
        }
        if iterations >= problem.settings.max_newton {
            return Err(fail(iterations, r));
        }
        iterations += 1;

        let j = match &jac {
            Some(j) => j.clone(),
            None => {
                let mut j = DMatrix::zeros(d, d);
                for c in 0..d {
                    let delta = 1e-7 * (1.0 + norm(&v));
                    let mut vp = v.clone();
                    vp[c] += delta;
                    let sp = ivp_fixed(problem, y, &vp, steps).map_err(|_| fail(iterations, r))?;
                    let fp = residual_of(&sp);
                    for row in 0..d {
                        j[(row, c)] = (fp[row] - f[row]) / delta;
                    }
                }
                jac = Some(j.clone());
                j
            }
        };
        let rhs = DVector::from_iterator(d, f.iter().map(|v| -v));
        let step = match j.clone().lu().solve(&rhs) {
            Some(s) => s,
            None => return Err(fail(iterations, r)),
        };

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-4 {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            if let Ok(s) = ivp_fixed(problem, y, &trial, steps) {
                let ft = residual_of(&s);
                let rt = norm(&ft);
                if rt < r || (r < tol && rt <= r) {
                    let ratio = rt / r;
                    v = trial;
                    sol = s;
                    f = ft;
                    r = rt;
                    accepted = true;
                    if ratio > 0.3 && r >= tol {
                        jac = None;
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if r < tol {
                break;
            }
            if jac.is_some() && start.is_some_and(|s| s.jacobian.is_some()) {
                // stale warm-start Jacobian; rebuild and retry
                jac = None;
                continue;
            }
            return Err(fail(iterations, r));
        }
        if r < tol && polish > 0 && r <= floor {
            break;
        }
    }

    let geodesic = build_geodesic(problem, y, &v, &sol)?;
    Ok(Shot { geodesic, jacobian: jac })
}

/// Right-hand side for geodesic state plus transport matrix `W`,
/// `dW/dlambda = -gamma'^mu B_mu(gamma) W`.
fn transport_rhs(problem: &LaplaceProblem) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync + '_ {
    let d = problem.dim;
    let m = problem.fiber_dim;
    let geo = geodesic_rhs(problem);
    move |t, y, dy| {
        geo(t, &y[..2 * d], &mut dy[..2 * d])?;
        let x = &y[..d];
        let v = &y[d..2 * d];
        let w = linalg::unpack(m, &y[2 * d..]);
        let mut gen = linalg::zeros(m);
        for (mu, b) in problem.connection.iter().enumerate() {
            if !b.is_zero() && v[mu] != 0.0 {
                gen += b.eval(x) * Complex64::new(v[mu], 0.0);
            }
        }
        let dw = -(gen * w);
        linalg::pack_into(&dw, &mut dy[2 * d..]);
        Ok(())
    }
}

fn transport_state(problem: &LaplaceProblem, start: &[f64], v0: &[f64]) -> Vec<f64> {
    let m = problem.fiber_dim;
    let mut y0: Vec<f64> = start.iter().chain(v0).copied().collect();
    let base = y0.len();
    y0.resize(base + 2 * m * m, 0.0);
    linalg::pack_into(&linalg::identity(m), &mut y0[base..]);
    y0
}

/// Ordered exponential `W(1)` of `dW/dlambda = -gamma'^mu B_mu(gamma) W`, `W(0) = 1`.
pub fn wilson_line(problem: &LaplaceProblem, geo: &Geodesic) -> Result<CMat> {
    let m = problem.fiber_dim;
    if problem.connection_is_zero() || geo.is_degenerate() {
        return Ok(linalg::identity(m));
    }
    let y0 = transport_state(problem, &geo.start, &geo.initial_velocity);
    let rhs = transport_rhs(problem);
    let ctl = Controller { min_steps: geo.macro_steps.max(4), ..controller(problem) };
    let sol = ode::integrate(&rhs, 0.0, 1.0, &y0, ctl)?;
    Ok(linalg::unpack(m, &sol.last()[2 * problem.dim..]))
}

/// Point, velocity and partial transport matrix at a sample of the geodesic.
#[derive(Debug, Clone)]
pub(crate) struct TransportSample {
    pub position: Point,
    pub velocity: Vec<f64>,
    pub transport: CMat,
}

/// Transport samples at ascending parameters `nodes` in `[0, 1]`, on a grid
/// of `steps_per_unit` macro steps per unit parameter.
///
/// With a constant metric the geodesic is a straight line; if the
/// connection is constant as well, the transport generator is constant along
/// it and `W(s) = exp(-s v0^mu B_mu)`.
pub(crate) fn transport_samples(
    problem: &LaplaceProblem,
    start: &[f64],
    v0: &[f64],
    nodes: &[f64],
    steps_per_unit: usize,
) -> Result<Vec<TransportSample>> {
    let d = problem.dim;
    let m = problem.fiber_dim;
    let straight = problem.metric_inv.is_constant();
    let line = |s: f64| -> Point { start.iter().zip(v0).map(|(a, b)| a + s * b).collect() };
    if straight && problem.connection.iter().all(MatrixField::is_constant) {
        let mut gen = linalg::zeros(m);
        for (mu, b) in problem.connection.iter().enumerate() {
            if !b.is_zero() {
                gen -= b.eval(start) * Complex64::new(v0[mu], 0.0);
            }
        }
        let zero = problem.connection_is_zero();
        return Ok(nodes
            .iter()
            .map(|&s| TransportSample {
                position: line(s),
                velocity: v0.to_vec(),
                transport: if zero { linalg::identity(m) } else { linalg::expm(&(&gen * Complex64::new(s, 0.0))) },
            })
            .collect());
    }
    let y0 = transport_state(problem, start, v0);
    let rhs = transport_rhs(problem);
    let states = ode::integrate_through(&rhs, 0.0, &y0, nodes, steps_per_unit)?;
    Ok(states
        .into_iter()
        .zip(nodes)
        .map(|(s, &t)| TransportSample {
            position: if straight { line(t) } else { s[..d].to_vec() },
            velocity: if straight { v0.to_vec() } else { s[d..2 * d].to_vec() },
            transport: linalg::unpack(m, &s[2 * d..]),
        })
        .collect())
}
