//! Gragg-Bulirsch-Stoer extrapolation on a uniform macro-step grid.
//!
//! Every macro step runs the modified midpoint rule with the substep
//! sequence `2, 4, ..., 12` and extrapolates in `h^2` (order 12). Step
//! control is global: the number of macro steps is doubled until the
//! extrapolation error estimate of every step is below the tolerance. For a
//! fixed macro-step count the end state is a smooth function of the initial
//! data, which is what finite differences of endpoint maps rely on.

use crate::error::{HeatError, Result};

const SEQUENCE: [usize; 6] = [2, 4, 6, 8, 10, 12];

/// Right-hand side `dy/dt = f(t, y)`.
pub trait Rhs: Sync {
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F> Rhs for F
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync,
{
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self(t, y, dy)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Controller {
    pub tol: f64,
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Controller {
    pub fn new(tol: f64) -> Self {
        Controller { tol, min_steps: 4, max_steps: 4096 }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Macro-step count accepted by the controller.
    pub steps: usize,
    /// States at the macro-step boundaries, `steps + 1` entries.
    pub knots: Vec<(f64, Vec<f64>)>,
    pub error_estimate: f64,
}

impl Solution {
    pub fn last(&self) -> &[f64] {
        &self.knots.last().expect("solution has knots").1
    }
}

fn scaled_norm(err: &[f64], y: &[f64]) -> f64 {
    err.iter()
        .zip(y)
        .map(|(e, v)| e.abs() / (1.0 + v.abs()))
        .fold(0.0, f64::max)
}

fn modified_midpoint<F: Rhs + ?Sized>(
    f: &F,
    t: f64,
    y: &[f64],
    f0: &[f64],
    big_h: f64,
    n: usize,
    out: &mut [f64],
) -> Result<()> {
    let dim = y.len();
    let h = big_h / n as f64;
    let mut z_prev = y.to_vec();
    let mut z: Vec<f64> = (0..dim).map(|i| y[i] + h * f0[i]).collect();
    let mut dz = vec![0.0; dim];
    for m in 1..n {
        f.eval(t + m as f64 * h, &z, &mut dz)?;
        for i in 0..dim {
            let next = z_prev[i] + 2.0 * h * dz[i];
            z_prev[i] = z[i];
            z[i] = next;
        }
    }
    f.eval(t + big_h, &z, &mut dz)?;
    for i in 0..dim {
        out[i] = 0.5 * (z[i] + z_prev[i] + h * dz[i]);
    }
    Ok(())
}

/// One extrapolated macro step. Returns the new state and the scaled error
/// estimate (difference of the two highest tableau entries).
pub fn macro_step<F: Rhs + ?Sized>(f: &F, t: f64, y: &[f64], big_h: f64) -> Result<(Vec<f64>, f64)> {
    let dim = y.len();
    let mut f0 = vec![0.0; dim];
    f.eval(t, y, &mut f0)?;
    // prev[i] = T_{j-1, i}; row[i] = T_{j, i}
    let mut prev: Vec<Vec<f64>> = Vec::new();
    for (j, &n) in SEQUENCE.iter().enumerate() {
        let mut base = vec![0.0; dim];
        modified_midpoint(f, t, y, &f0, big_h, n, &mut base)?;
        let mut row = Vec::with_capacity(j + 1);
        row.push(base);
        for i in 1..=j {
            let ratio = (n as f64 / SEQUENCE[j - i] as f64).powi(2) - 1.0;
            let next: Vec<f64> = (0..dim)
                .map(|q| row[i - 1][q] + (row[i - 1][q] - prev[i - 1][q]) / ratio)
                .collect();
            row.push(next);
        }
        prev = row;
    }
    let best = prev.pop().expect("tableau row is non-empty");
    let second = prev.pop().expect("tableau has at least two columns");
    let err: Vec<f64> = best.iter().zip(&second).map(|(a, b)| a - b).collect();
    let e = scaled_norm(&err, &best);
    Ok((best, e))
}

/// Integrate on a fixed grid of `steps` macro steps.
pub fn integrate_fixed<F: Rhs + ?Sized>(
    f: &F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    steps: usize,
) -> Result<Solution> {
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut knots = Vec::with_capacity(steps + 1);
    knots.push((t0, y0.to_vec()));
    let mut y = y0.to_vec();
    let mut worst = 0.0_f64;
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        let (next, e) = macro_step(f, t, &y, h)?;
        worst = worst.max(e);
        y = next;
        let t_next = if s + 1 == steps { t1 } else { t0 + (s + 1) as f64 * h };
        knots.push((t_next, y.clone()));
    }
    Ok(Solution { steps, knots, error_estimate: worst })
}

/// Integrate with global step doubling until the error estimate meets the
/// controller tolerance.
pub fn integrate<F: Rhs + ?Sized>(f: &F, t0: f64, t1: f64, y0: &[f64], ctl: Controller) -> Result<Solution> {
    let mut steps = ctl.min_steps.max(1);
    loop {
        let sol = integrate_fixed(f, t0, t1, y0, steps)?;
        if sol.error_estimate <= ctl.tol {
            return Ok(sol);
        }
        if steps * 2 > ctl.max_steps {
            return Err(HeatError::OdeTolerance { estimate: sol.error_estimate, steps });
        }
        steps *= 2;
    }
}

/// States at the ascending `nodes` (all >= `t0`), integrating on a grid whose
/// density is `steps_per_unit` macro steps per unit of `t`.
pub fn integrate_through<F: Rhs + ?Sized>(
    f: &F,
    t0: f64,
    y0: &[f64],
    nodes: &[f64],
    steps_per_unit: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut t = t0;
    let mut y = y0.to_vec();
    for &node in nodes {
        debug_assert!(node >= t, "nodes must be ascending");
        let span = node - t;
        if span > 0.0 {
            let steps = ((steps_per_unit as f64 * span).ceil() as usize).max(1);
            let sol = integrate_fixed(f, t, node, &y, steps)?;
            y = sol.last().to_vec();
        }
        t = node;
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_is_accurate() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        };
        let sol = integrate(&f, 0.0, 3.0, &[1.0, 0.0], Controller::new(1e-12)).unwrap();
        let y = sol.last();
        assert!((y[0] - 3.0_f64.cos()).abs() < 1e-11);
        assert!((y[1] + 3.0_f64.sin()).abs() < 1e-11);
    }

    #[test]
    fn exponential_growth_through_nodes() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[0];
            Ok(())
        };
        let nodes = [0.1, 0.5, 0.5, 1.0];
        let states = integrate_through(&f, 0.0, &[1.0], &nodes, 8).unwrap();
        for (s, state) in nodes.iter().zip(&states) {
            assert!((state[0] - s.exp()).abs() < 1e-13, "{s}");
        }
    }

    #[test]
    fn stiff_request_reports_tolerance_failure() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = -5000.0 * y[0];
            Ok(())
        };
        let ctl = Controller { tol: 1e-14, min_steps: 1, max_steps: 8 };
        assert!(matches!(integrate(&f, 0.0, 1.0, &[1.0], ctl), Err(HeatError::OdeTolerance { .. })));
    }
}
