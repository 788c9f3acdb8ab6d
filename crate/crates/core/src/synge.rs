//! Synge's world function and the Van Vleck-Morette determinant.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HeatError, Result};
use crate::geometry::{self, metric_pack, LaplaceProblem, Shot, ShootingStart};

/// Two-point geometric data for one endpoint pair. Gradients are taken in `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyngeData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub sigma_lower: Vec<f64>,
    pub sigma_upper: Vec<f64>,
    /// `None` until [`van_vleck`] has been evaluated for the pair.
    pub vanvleck: Option<f64>,
}

impl SyngeData {
    /// `sigma_mu sigma^mu - 2 sigma`
    pub fn hamilton_jacobi_defect(&self) -> f64 {
        let s: f64 = self.sigma_lower.iter().zip(&self.sigma_upper).map(|(a, b)| a * b).sum();
        s - 2.0 * self.sigma
    }
}

fn coincident(x: &[f64], y: &[f64]) -> bool {
    LaplaceProblem::coordinate_distance(x, y) < 1e-12
}

pub(crate) fn from_shot(problem: &LaplaceProblem, x: &[f64], y: &[f64], shot: &Shot) -> Result<SyngeData> {
    let geo = &shot.geodesic;
    let upper = geo.final_velocity().to_vec();
    let g = problem.lower_metric(x)?;
    let lower: Vec<f64> = (0..problem.dim).map(|mu| (0..problem.dim).map(|nu| g[(mu, nu)] * upper[nu]).sum()).collect();
    Ok(SyngeData {
        x: x.to_vec(),
        y: y.to_vec(),
        sigma: 0.5 * geo.energy,
        sigma_lower: lower,
        sigma_upper: upper,
        vanvleck: None,
    })
}

/// `sigma = E / 2` for the affine geodesic from `y` to `x`, with
/// `sigma^mu = gamma'(1)` and `sigma_mu = g_{mu nu}(x) gamma'^nu(1)`.
pub fn world_function(problem: &LaplaceProblem, x: &[f64], y: &[f64]) -> Result<SyngeData> {
    problem.check_point(x)?;
    problem.check_point(y)?;
    if coincident(x, y) {
        return Ok(SyngeData {
            x: x.to_vec(),
            y: y.to_vec(),
            sigma: 0.0,
            sigma_lower: vec![0.0; problem.dim],
            sigma_upper: vec![0.0; problem.dim],
            vanvleck: None,
        });
    }
    let shot = geometry::shoot(problem, y, x, None)?;
    from_shot(problem, x, y, &shot)
}

/// Van Vleck-Morette determinant
/// `Delta = (g(x) g(y))^{-1/2} det(-d^2 sigma / dx^mu dy^nu)`.
///
/// The mixed Hessian is the `y`-derivative of `sigma_mu(x, y)`, taken with a
/// fourth-order central difference of step `vv_step`.
pub fn van_vleck(problem: &LaplaceProblem, x: &[f64], y: &[f64]) -> Result<f64> {
    problem.check_point(x)?;
    problem.check_point(y)?;
    if coincident(x, y) {
        return Ok(1.0);
    }
    let shot = geometry::shoot(problem, y, x, None)?;
    van_vleck_from(problem, x, y, &shot)
}

/// World function and determinant together.
pub fn synge_data(problem: &LaplaceProblem, x: &[f64], y: &[f64]) -> Result<SyngeData> {
    let mut data = world_function(problem, x, y)?;
    data.vanvleck = Some(van_vleck(problem, x, y)?);
    Ok(data)
}

/// Determinant given the converged shot from `y` to `x`, which warm-starts
/// the displaced solves.
pub(crate) fn van_vleck_from(problem: &LaplaceProblem, x: &[f64], y: &[f64], shot: &Shot) -> Result<f64> {
    let d = problem.dim;
    if coincident(x, y) {
        return Ok(1.0);
    }
    let h = problem.settings.vv_step_for(LaplaceProblem::coordinate_distance(x, y));
    let start = ShootingStart {
        velocity: shot.geodesic.initial_velocity.clone(),
        steps: shot.geodesic.macro_steps,
        jacobian: shot.jacobian.clone(),
    };
    let g_x = problem.lower_metric(x)?;
    let lower_at = |yy: &[f64]| -> Result<Vec<f64>> {
        let s = geometry::shoot(problem, yy, x, Some(&start))?;
        let v = s.geodesic.final_velocity();
        Ok((0..d).map(|mu| (0..d).map(|nu| g_x[(mu, nu)] * v[nu]).sum()).collect())
    };
    let mut hess = DMatrix::zeros(d, d);
    for nu in 0..d {
        let mut samples = Vec::with_capacity(4);
        for offset in [-2.0, -1.0, 1.0, 2.0] {
            let mut yy = y.to_vec();
            yy[nu] += offset * h;
            samples.push(lower_at(&yy)?);
        }
        for mu in 0..d {
            let deriv = (samples[0][mu] - 8.0 * samples[1][mu] + 8.0 * samples[2][mu] - samples[3][mu]) / (12.0 * h);
            hess[(mu, nu)] = -deriv;
        }
    }
    let det = hess.determinant();
    if !(det > 0.0) {
        return Err(HeatError::NegativeDeterminant { value: det });
    }
    let gx = metric_pack(problem, x)?.det;
    let gy = metric_pack(problem, y)?.det;
    Ok(det / (gx * gy).sqrt())
}

/// The literal route: second-order central differences of `sigma` itself
/// over both endpoints, `(2d)^2` world-function evaluations. Kept as an
/// independent cross-check of [`van_vleck`].
pub fn van_vleck_from_sigma(problem: &LaplaceProblem, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = problem.dim;
    if coincident(x, y) {
        return Ok(1.0);
    }
    let h = problem.settings.vv_step_for(LaplaceProblem::coordinate_distance(x, y));
    let sigma = |xx: &[f64], yy: &[f64]| world_function(problem, xx, yy).map(|s| s.sigma);
    let mut hess = DMatrix::zeros(d, d);
    for mu in 0..d {
        for nu in 0..d {
            let mut acc = 0.0;
            for (sx, sy, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut xx = x.to_vec();
                let mut yy = y.to_vec();
                xx[mu] += sx * h;
                yy[nu] += sy * h;
                acc += w * sigma(&xx, &yy)?;
            }
            hess[(mu, nu)] = -acc / (4.0 * h * h);
        }
    }
    let det = hess.determinant();
    if !(det > 0.0) {
        return Err(HeatError::NegativeDeterminant { value: det });
    }
    let gx = metric_pack(problem, x)?.det;
    let gy = metric_pack(problem, y)?.det;
    Ok(det / (gx * gy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_bvp;
    use crate::presets;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn flat_world_function() {
        let p = presets::flat(2);
        let s = world_function(&p, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((s.sigma - 0.5).abs() < 1e-14);
        assert!((s.sigma_upper[0] - 1.0).abs() < 1e-14);
        assert!(s.sigma_upper[1].abs() < 1e-14);
        let same = world_function(&p, &[0.2, 0.2], &[0.2, 0.2]).unwrap();
        assert_eq!(same.sigma, 0.0);
        assert_eq!(same.sigma_upper, vec![0.0, 0.0]);
    }

    #[test]
    fn polar_chord() {
        let p = presets::polar_flat(0.0);
        let s = synge_data(&p, &[1.0, FRAC_PI_2], &[1.0, 0.0]).unwrap();
        assert!((s.sigma - 1.0).abs() < 10.0 * p.settings.bvp_tol);
        assert!(s.hamilton_jacobi_defect().abs() < 10.0 * p.settings.bvp_tol);
        assert!((s.vanvleck.unwrap() - 1.0).abs() < 1e-6, "{:?}", s.vanvleck);
    }

    #[test]
    fn flat_van_vleck_is_one() {
        let p = presets::flat(2);
        let v = van_vleck(&p, &[0.7, -0.2], &[-0.4, 0.5]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        assert_eq!(van_vleck(&p, &[0.1, 0.1], &[0.1, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn both_van_vleck_routes_agree() {
        let p = presets::polar_flat(0.0);
        let (x, y) = ([1.8, 0.4], [1.1, -0.3]);
        let a = van_vleck(&p, &x, &y).unwrap();
        let b = van_vleck_from_sigma(&p, &x, &y).unwrap();
        assert!((a - 1.0).abs() < 1e-7, "{a}");
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn sphere_van_vleck_curvature_term() {
        // oracle: Delta = s / sin s on the unit sphere, i.e. 1 + s^2/6 + 7 s^4/360
        let p = presets::sphere_patch();
        let y = [FRAC_PI_2, 0.0];
        let mut fits = Vec::new();
        for s in [0.02_f64, 0.04, 0.08] {
            let x = [FRAC_PI_2 + s * 0.6, s * 0.8];
            let geo = geodesic_bvp(&p, &y, &x).unwrap();
            let dist = geo.energy.sqrt();
            let delta = van_vleck(&p, &x, &y).unwrap();
            assert!((delta - dist / dist.sin()).abs() < 1e-9, "{delta}");
            fits.push((delta - 1.0) / (dist * dist));
        }
        for f in fits {
            // R / 12 with R = 2
            assert!((f - 1.0 / 6.0).abs() < 2e-3, "{f}");
        }
    }

    #[test]
    fn world_function_scales_along_geodesic() {
        let p = presets::polar_flat(0.0);
        let (x, y) = ([2.0, 0.8], [1.0, -0.2]);
        let geo = geodesic_bvp(&p, &y, &x).unwrap();
        let full = world_function(&p, &x, &y).unwrap().sigma;
        for lambda in [0.25, 0.5, 0.75] {
            let mid = crate::geometry::geodesic_ivp(
                &p,
                &y,
                &geo.initial_velocity.iter().map(|v| v * lambda).collect::<Vec<_>>(),
            )
            .unwrap();
            let point = &mid.knots.last().unwrap().position;
            let part = world_function(&p, point, &y).unwrap().sigma;
            assert!((part - lambda * lambda * full).abs() < 10.0 * p.settings.bvp_tol);
        }
    }
}
