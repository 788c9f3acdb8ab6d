//! Gamma-function helpers with exact zeros and integer fast paths.

/// `1/Gamma(x)`, exactly zero at the poles `x = 0, -1, -2, ...`.
pub fn recip_gamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return 0.0;
    }
    if x == x.floor() && x <= 171.0 {
        return 1.0 / factorial(x as u32 - 1);
    }
    1.0 / statrs::function::gamma::gamma(x)
}

pub fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Rising factorial `(a)_n = Gamma(a + n) / Gamma(a)`, taken as a product so
/// that it stays finite for non-positive integer `a`.
pub fn pochhammer(a: f64, n: u32) -> f64 {
    (0..n).fold(1.0, |acc, j| acc * (a + j as f64))
}

pub fn erf(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

/// Falling factorial `p (p - 1) ... (p - j + 1)`.
pub fn falling(p: f64, j: u32) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (p - i as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_gamma_poles_are_exact_zeros() {
        for n in 0..20 {
            assert_eq!(recip_gamma(-(n as f64)), 0.0);
        }
        assert_eq!(recip_gamma(1.0), 1.0);
        assert_eq!(recip_gamma(5.0), 1.0 / 24.0);
        let half = recip_gamma(0.5);
        assert!((half - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn pochhammer_at_poles() {
        assert_eq!(pochhammer(0.0, 0), 1.0);
        assert_eq!(pochhammer(0.0, 3), 0.0);
        assert_eq!(pochhammer(-2.0, 2), 2.0);
        assert_eq!(pochhammer(-2.0, 3), 0.0);
        assert_eq!(pochhammer(1.0, 4), 24.0);
    }
}
