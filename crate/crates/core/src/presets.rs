//! Named problems with known closed forms.
//!
//! Constructors panic only on non-finite parameters; callers that take user
//! input validate first.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::geometry::{ChartBox, LaplaceProblem, MatrixField, MetricField};
use crate::linalg::{self, CMat};

fn build(name: &str, metric: MetricField, connection: Vec<MatrixField>, potential: MatrixField, domain: ChartBox) -> LaplaceProblem {
    LaplaceProblem::new(name, metric, connection, potential, domain)
        .unwrap_or_else(|e| panic!("preset {name} is invalid: {e}"))
}

fn no_connection(dim: usize, m: usize) -> Vec<MatrixField> {
    (0..dim).map(|_| MatrixField::Zero { m }).collect()
}

/// Half-width of the Cartesian chart boxes.
pub const CARTESIAN_HALF_WIDTH: f64 = 5.0;

/// `-d^2` on a Euclidean box.
pub fn flat(dim: usize) -> LaplaceProblem {
    build(
        "flat",
        MetricField::euclidean(dim),
        no_connection(dim, 1),
        MatrixField::Zero { m: 1 },
        ChartBox::cube(dim, CARTESIAN_HALF_WIDTH),
    )
}

/// `v = c`.
pub fn constant_potential(dim: usize, c: f64) -> LaplaceProblem {
    build(
        "constant-c",
        MetricField::euclidean(dim),
        no_connection(dim, 1),
        MatrixField::Constant(linalg::scalar(1, linalg::c(c))),
        ChartBox::cube(dim, CARTESIAN_HALF_WIDTH),
    )
}

/// `v = -omega^2 |x|^2`, i.e. `A = -d^2 + omega^2 |x|^2`.
pub fn harmonic(dim: usize, omega: f64) -> LaplaceProblem {
    let w2 = omega * omega;
    build(
        "harmonic",
        MetricField::euclidean(dim),
        no_connection(dim, 1),
        MatrixField::scalar(1, move |x| -w2 * x.iter().map(|v| v * v).sum::<f64>()),
        ChartBox::cube(dim, CARTESIAN_HALF_WIDTH),
    )
}

/// `v = slope * x_1`.
pub fn linear_potential(dim: usize, slope: f64) -> LaplaceProblem {
    build(
        "linear",
        MetricField::euclidean(dim),
        no_connection(dim, 1),
        MatrixField::scalar(1, move |x| slope * x[0]),
        ChartBox::cube(dim, CARTESIAN_HALF_WIDTH),
    )
}

/// One-dimensional potential close to `c1` around `-center` and to `c2`
/// around `+center`, switching over a layer of the given width at 0.
pub fn two_well(c1: f64, c2: f64, width: f64, center: f64) -> LaplaceProblem {
    let mut p = build(
        "two-well",
        MetricField::euclidean(1),
        no_connection(1, 1),
        MatrixField::scalar(1, move |x| two_well_value(c1, c2, width, x[0])),
        ChartBox::cube(1, (2.0 * center).max(CARTESIAN_HALF_WIDTH)),
    );
    p.name = format!("two-well({c1},{c2})");
    p
}

pub fn two_well_value(c1: f64, c2: f64, width: f64, x: f64) -> f64 {
    c1 + (c2 - c1) * 0.5 * (1.0 + (x / width).tanh())
}

/// Constant Abelian connection `B_mu = xi_mu` with `v = c`.
pub fn constant_abelian(xi: &[f64], c: f64) -> LaplaceProblem {
    build(
        "constant-abelian",
        MetricField::euclidean(xi.len()),
        xi.iter().map(|&x| MatrixField::Constant(linalg::scalar(1, linalg::c(x)))).collect(),
        MatrixField::Constant(linalg::scalar(1, linalg::c(c))),
        ChartBox::cube(xi.len(), CARTESIAN_HALF_WIDTH),
    )
}

/// Anti-Hermitian packaging `B_mu = i xi_mu` of a constant Abelian field,
/// which makes the operator symmetric.
pub fn abelian_phase(xi: &[f64], c: f64) -> LaplaceProblem {
    let mut p = build(
        "abelian-phase",
        MetricField::euclidean(xi.len()),
        xi.iter().map(|&x| MatrixField::Constant(linalg::scalar(1, Complex64::new(0.0, x)))).collect(),
        MatrixField::Constant(linalg::scalar(1, linalg::c(c))),
        ChartBox::cube(xi.len(), CARTESIAN_HALF_WIDTH),
    );
    p.name = "abelian-phase".into();
    p
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[linalg::c(0.0), linalg::c(1.0), linalg::c(1.0), linalg::c(0.0)])
}

pub fn pauli_y() -> CMat {
    let i = Complex64::new(0.0, 1.0);
    CMat::from_row_slice(2, 2, &[linalg::c(0.0), -i, i, linalg::c(0.0)])
}

pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[linalg::c(1.0), linalg::c(0.0), linalg::c(0.0), linalg::c(-1.0)])
}

/// `d = 2`, `m = 2`, `B_1 = i b1 sigma_x`, `B_2 = i b2 sigma_z`, `v = c sigma_y`.
pub fn nonabelian_constant(b1: f64, b2: f64, c: f64) -> LaplaceProblem {
    let i = Complex64::new(0.0, 1.0);
    build(
        "nonabelian-constant",
        MetricField::euclidean(2),
        vec![
            MatrixField::Constant(pauli_x() * (i * b1)),
            MatrixField::Constant(pauli_z() * (i * b2)),
        ],
        MatrixField::Constant(pauli_y() * linalg::c(c)),
        ChartBox::cube(2, CARTESIAN_HALF_WIDTH),
    )
}

/// Flat plane in polar coordinates `(r, theta)` with `v = slope * r cos(theta)`,
/// the same linear potential as [`linear_potential`] in the Cartesian chart.
pub fn polar_flat(slope: f64) -> LaplaceProblem {
    build(
        "polar-flat",
        MetricField::varying(2, |x| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / (x[0] * x[0])])),
        no_connection(2, 1),
        MatrixField::scalar(1, move |x| slope * x[0] * x[1].cos()),
        ChartBox::new(vec![0.3, -1.8], vec![4.0, 1.8]).expect("box"),
    )
}

/// Unit 2-sphere around the equator in `(theta, phi)`, scalar curvature 2.
pub fn sphere_patch() -> LaplaceProblem {
    use std::f64::consts::FRAC_PI_2;
    build(
        "sphere-patch",
        MetricField::varying(2, |x| {
            let s = x[0].sin();
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / (s * s)])
        }),
        no_connection(2, 1),
        MatrixField::Zero { m: 1 },
        ChartBox::new(vec![FRAC_PI_2 - 1.0, -1.0], vec![FRAC_PI_2 + 1.0, 1.0]).expect("box"),
    )
}

/// Cartesian to polar coordinates.
pub fn to_polar(p: &[f64]) -> Vec<f64> {
    vec![p[0].hypot(p[1]), p[1].atan2(p[0])]
}

/// Names accepted by [`by_name`].
pub const NAMES: &[&str] = &[
    "flat",
    "constant-c",
    "harmonic",
    "linear",
    "two-well",
    "constant-abelian",
    "abelian-phase",
    "nonabelian-constant",
    "polar-flat",
    "sphere-patch",
];

/// Parameters for [`by_name`]; unused ones are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetParams {
    pub dim: usize,
    pub c: f64,
    pub c2: f64,
    pub omega: f64,
    pub xi: Vec<f64>,
    pub width: f64,
    pub center: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        PresetParams { dim: 1, c: 1.0, c2: -1.0, omega: 1.0, xi: vec![0.5], width: 0.2, center: 3.0 }
    }
}

pub fn by_name(name: &str, p: &PresetParams) -> Option<LaplaceProblem> {
    let finite = [p.c, p.c2, p.omega, p.width, p.center].iter().chain(&p.xi).all(|v| v.is_finite());
    if !finite || p.dim == 0 || p.dim > 3 {
        return None;
    }
    Some(match name {
        "flat" => flat(p.dim),
        "constant-c" => constant_potential(p.dim, p.c),
        "harmonic" => harmonic(p.dim, p.omega),
        "linear" => linear_potential(p.dim, p.c),
        "two-well" if p.width > 0.0 => two_well(p.c, p.c2, p.width, p.center),
        "constant-abelian" => constant_abelian(&p.xi, p.c),
        "abelian-phase" => abelian_phase(&p.xi, p.c),
        "nonabelian-constant" => nonabelian_constant(*p.xi.first()?, *p.xi.get(1)?, p.c),
        "polar-flat" => polar_flat(p.c),
        "sphere-patch" => sphere_patch(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_preset_builds() {
        let params = PresetParams { xi: vec![0.4, 0.7], ..Default::default() };
        for name in NAMES {
            let p = by_name(name, &params).unwrap_or_else(|| panic!("{name}"));
            assert!(p.dim >= 1);
        }
        assert!(by_name("nope", &params).is_none());
        assert!(by_name("flat", &PresetParams { c: f64::NAN, ..Default::default() }).is_none());
    }

    #[test]
    fn non_hermitian_potential_is_rejected() {
        let bad = LaplaceProblem::new(
            "bad",
            MetricField::euclidean(1),
            vec![MatrixField::Zero { m: 2 }],
            MatrixField::Constant(pauli_x() * Complex64::new(0.0, 1.0)),
            ChartBox::cube(1, 1.0),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn indefinite_metric_is_rejected() {
        let bad = LaplaceProblem::new(
            "bad",
            MetricField::Constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
            no_connection(2, 1),
            MatrixField::Zero { m: 1 },
            ChartBox::cube(2, 1.0),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn two_well_levels() {
        assert!((two_well_value(1.0, -1.0, 0.2, -3.0) - 1.0).abs() < 1e-12);
        assert!((two_well_value(1.0, -1.0, 0.2, 3.0) + 1.0).abs() < 1e-12);
    }
}
