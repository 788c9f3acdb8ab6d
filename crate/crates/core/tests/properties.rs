use heatlab_core::feynman_kac::{self, FlatProblem, McParams};
use heatlab_core::geometry::{self, ChartBox, LaplaceProblem, MatrixField, MetricField};
use heatlab_core::linalg::{self, CMat};
use heatlab_core::{presets, sdw, synge};
use num_complex::Complex64;
use proptest::prelude::*;

fn polar_point() -> impl Strategy<Value = Vec<f64>> {
    (0.8..2.5_f64, -0.8..0.8_f64).prop_map(|(r, t)| vec![r, t])
}

fn sphere_point() -> impl Strategy<Value = Vec<f64>> {
    let mid = std::f64::consts::FRAC_PI_2;
    (mid - 0.6..mid + 0.6, -0.6..0.6_f64).prop_map(|(t, p)| vec![t, p])
}

fn separated(x: &[f64], y: &[f64]) -> bool {
    LaplaceProblem::coordinate_distance(x, y) > 0.05
}

/// `B_1 = i x_2 sigma_x`, `B_2 = i x_1 sigma_z` on the flat plane.
fn twisted_connection() -> LaplaceProblem {
    let i = Complex64::new(0.0, 1.0);
    LaplaceProblem::new(
        "twisted",
        MetricField::euclidean(2),
        vec![
            MatrixField::varying(2, move |x| presets::pauli_x() * (i * x[1])),
            MatrixField::varying(2, move |x| presets::pauli_z() * (i * x[0])),
        ],
        MatrixField::Zero { m: 2 },
        ChartBox::cube(2, 3.0),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn christoffel_symbols_are_symmetric(x in sphere_point(), polar in polar_point()) {
        for (p, z) in [(presets::sphere_patch(), x), (presets::polar_flat(0.0), polar)] {
            let g = geometry::christoffel(&p, &z).unwrap();
            for l in 0..2 {
                for m in 0..2 {
                    for n in 0..2 {
                        prop_assert!((g.get(l, m, n) - g.get(l, n, m)).abs() <= 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn geodesic_energy_is_conserved(x in sphere_point(), v in prop::collection::vec(-0.4..0.4_f64, 2)) {
        let p = presets::sphere_patch();
        let geo = geometry::geodesic_ivp(&p, &x, &v).unwrap();
        prop_assert!(geo.energy_drift(&p).unwrap() <= 10.0 * p.settings.ode_tol);
    }

    #[test]
    fn bvp_then_ivp_returns_to_the_target(x in sphere_point(), y in sphere_point()) {
        prop_assume!(separated(&x, &y));
        let p = presets::sphere_patch();
        let geo = geometry::geodesic_bvp(&p, &y, &x).unwrap();
        let back = geometry::geodesic_ivp(&p, &y, &geo.initial_velocity).unwrap();
        prop_assert!(LaplaceProblem::coordinate_distance(&back.end, &x) <= p.settings.bvp_tol);
    }

    #[test]
    fn hamilton_jacobi_and_symmetry(x in polar_point(), y in polar_point(), xs in sphere_point(), ys in sphere_point()) {
        prop_assume!(separated(&x, &y) && separated(&xs, &ys));
        for (p, a, b) in [(presets::polar_flat(0.0), x, y), (presets::sphere_patch(), xs, ys)] {
            let tol = 10.0 * p.settings.bvp_tol;
            let fwd = synge::world_function(&p, &a, &b).unwrap();
            let bwd = synge::world_function(&p, &b, &a).unwrap();
            prop_assert!(fwd.hamilton_jacobi_defect().abs() <= tol, "{}", fwd.hamilton_jacobi_defect());
            prop_assert!((fwd.sigma - bwd.sigma).abs() <= tol);
        }
    }

    #[test]
    fn world_function_scales_quadratically(x in sphere_point(), y in sphere_point()) {
        prop_assume!(separated(&x, &y));
        let p = presets::sphere_patch();
        let tol = 10.0 * p.settings.bvp_tol;
        let full = synge::world_function(&p, &x, &y).unwrap();
        let geo = geometry::geodesic_bvp(&p, &y, &x).unwrap();
        for lambda in [0.25, 0.5, 0.75] {
            let v: Vec<f64> = geo.initial_velocity.iter().map(|v| v * lambda).collect();
            let mid = geometry::geodesic_ivp(&p, &y, &v).unwrap().end;
            let part = synge::world_function(&p, &mid, &y).unwrap();
            prop_assert!((part.sigma - lambda * lambda * full.sigma).abs() <= tol);
        }
    }

    #[test]
    fn wilson_line_reverses_to_its_inverse(x in prop::collection::vec(-1.0..1.0_f64, 2), y in prop::collection::vec(-1.0..1.0_f64, 2)) {
        prop_assume!(separated(&x, &y));
        let p = twisted_connection();
        let geo = geometry::geodesic_bvp(&p, &y, &x).unwrap();
        let fwd = geometry::wilson_line(&p, &geo).unwrap();
        let bwd = geometry::wilson_line(&p, &geo.reversed()).unwrap();
        prop_assert!(linalg::frobenius_distance(&(bwd * fwd), &linalg::identity(2)) <= 10.0 * p.settings.ode_tol);
    }

    #[test]
    fn leading_coefficient_is_identity_on_the_diagonal(x in prop::collection::vec(-1.0..1.0_f64, 2)) {
        let p = twisted_connection();
        prop_assert_eq!(sdw::a0(&p, &x, &x).unwrap(), linalg::identity(2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn van_vleck_is_symmetric(x in sphere_point(), y in sphere_point()) {
        prop_assume!(LaplaceProblem::coordinate_distance(&x, &y) > 0.2);
        let p = presets::sphere_patch();
        let fwd = synge::van_vleck(&p, &x, &y).unwrap();
        let bwd = synge::van_vleck(&p, &y, &x).unwrap();
        prop_assert!((fwd - bwd).abs() <= 1e-6, "{fwd} vs {bwd}");
    }

    #[test]
    fn mc_estimates_are_deterministic_and_finite(seed in 0..u64::MAX, x in -1.0..1.0_f64) {
        let p = FlatProblem::from_problem(&presets::harmonic(1, 1.0)).unwrap();
        let params = McParams { n_paths: 500, n_steps: 16, seed, ..Default::default() };
        let a = feynman_kac::kernel_mc(&p, &[x], &[0.1], 0.4, &params).unwrap();
        let b = feynman_kac::kernel_mc(&p, &[x], &[0.1], 0.4, &params).unwrap();
        prop_assert!(a.stderr.iter().flatten().all(|s| s.is_finite() && *s >= 0.0));
        prop_assert_eq!(a, b);
    }
}

/// `B -> B + i d chi` turns `a_k(x, y)` into `e^{-i chi(x)} a_k e^{i chi(y)}`.
#[test]
fn gauge_covariance_of_the_coefficients() {
    let base = presets::nonabelian_constant(0.6, 0.9, 0.3);
    let chi = |x: &[f64]| 0.3 * x[0] + 0.2 * x[0] * x[1] - 0.1 * x[1] * x[1];
    let grad = [|x: &[f64]| 0.3 + 0.2 * x[1], |x: &[f64]| 0.2 * x[0] - 0.2 * x[1]];
    let i = Complex64::new(0.0, 1.0);
    let connection: Vec<MatrixField> = base
        .connection
        .iter()
        .zip(grad)
        .map(|(b, dchi)| {
            let b = b.eval(&[0.0, 0.0]);
            MatrixField::varying(2, move |x| &b + linalg::identity(2) * (i * dchi(x)))
        })
        .collect();
    let gauged = LaplaceProblem::new(
        "gauged",
        base.metric_inv.clone(),
        connection,
        base.potential.clone(),
        base.domain.clone(),
    )
    .unwrap();
    let (x, y) = ([0.4, -0.2], [-0.3, 0.5]);
    let plain = sdw::sdw_coefficients(&base, &x, &y, 2).unwrap();
    let twisted = sdw::sdw_coefficients(&gauged, &x, &y, 2).unwrap();
    let phase = |z: &[f64], sign: f64| -> CMat { linalg::identity(2) * (i * sign * chi(z)).exp() };
    for k in 0..=2 {
        let expected = phase(&x, -1.0) * &plain.coeffs[k] * phase(&y, 1.0);
        let err = linalg::frobenius_distance(&twisted.coeffs[k], &expected);
        assert!(err < base.settings.recur_tol, "k = {k}: {err}");
    }
}
