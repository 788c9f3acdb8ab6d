//! Small dense complex matrices for fibre-valued quantities.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub fn identity(m: usize) -> CMat {
    CMat::identity(m, m)
}

pub fn zeros(m: usize) -> CMat {
    CMat::zeros(m, m)
}

pub fn scalar(m: usize, value: Complex64) -> CMat {
    CMat::from_diagonal_element(m, m, value)
}

pub fn from_real(a: &DMatrix<f64>) -> CMat {
    a.map(c)
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dagger(a: &CMat) -> CMat {
    a.adjoint()
}

pub fn frobenius_distance(a: &CMat, b: &CMat) -> f64 {
    frobenius(&(a - b))
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    frobenius_distance(a, &a.adjoint()) <= tol * (1.0 + frobenius(a))
}

pub fn commutes(a: &CMat, b: &CMat, tol: f64) -> bool {
    frobenius(&(a * b - b * a)) <= tol * (1.0 + frobenius(a) * frobenius(b))
}

/// Matrix exponential. 1x1 is done directly; larger matrices use nalgebra's
/// Pade scaling-and-squaring.
pub fn expm(a: &CMat) -> CMat {
    if a.nrows() == 1 {
        return CMat::from_element(1, 1, a[(0, 0)].exp());
    }
    a.exp()
}

pub fn inverse(a: &CMat) -> Option<CMat> {
    if a.nrows() == 1 {
        let z = a[(0, 0)];
        if z == Complex64::new(0.0, 0.0) {
            return None;
        }
        return Some(CMat::from_element(1, 1, z.inv()));
    }
    a.clone().try_inverse()
}

/// Row-major `[re, im]` pairs, the wire encoding used for matrices.
pub fn to_pairs(a: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| [a[(i, j)].re, a[(i, j)].im]).collect())
        .collect()
}

pub fn from_pairs(rows: &[Vec<[f64; 2]>]) -> Option<CMat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return None;
    }
    Some(CMat::from_fn(n, m, |i, j| {
        Complex64::new(rows[i][j][0], rows[i][j][1])
    }))
}

/// Pack a complex matrix into a real vector (re, im interleaved, column major).
pub fn pack_into(a: &CMat, out: &mut [f64]) {
    for (k, z) in a.iter().enumerate() {
        out[2 * k] = z.re;
        out[2 * k + 1] = z.im;
    }
}

pub fn unpack(m: usize, data: &[f64]) -> CMat {
    CMat::from_fn(m, m, |i, j| {
        let k = j * m + i;
        Complex64::new(data[2 * k], data[2 * k + 1])
    })
}

/// Sum with pairwise reduction so that the result does not depend on how a
/// caller chunked the work, only on the order of `items`.
pub fn pairwise_sum(items: &[CMat]) -> CMat {
    match items.len() {
        0 => panic!("pairwise_sum of an empty slice"),
        1 => items[0].clone(),
        n => {
            let (a, b) = items.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn pairwise_sum_f64(items: &[f64]) -> f64 {
    match items.len() {
        0 => 0.0,
        1 => items[0],
        n => {
            let (a, b) = items.split_at(n / 2);
            pairwise_sum_f64(a) + pairwise_sum_f64(b)
        }
    }
}

/// Serde adapter writing a matrix as row-major `[re, im]` pairs.
pub mod serde_cmat {
    use super::{from_pairs, to_pairs, CMat};
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &CMat, s: S) -> Result<S::Ok, S::Error> {
        to_pairs(a).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMat, D::Error> {
        let rows: Vec<Vec<[f64; 2]>> = Deserialize::deserialize(d)?;
        from_pairs(&rows).ok_or_else(|| D::Error::custom("ragged matrix"))
    }
}

/// Serde adapter for a list of matrices.
pub mod serde_cmats {
    use super::{from_pairs, to_pairs, CMat};
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &[CMat], s: S) -> Result<S::Ok, S::Error> {
        a.iter().map(to_pairs).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CMat>, D::Error> {
        let all: Vec<Vec<Vec<[f64; 2]>>> = Deserialize::deserialize(d)?;
        all.iter().map(|rows| from_pairs(rows).ok_or_else(|| D::Error::custom("ragged matrix"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip() {
        let a = CMat::from_fn(2, 2, |i, j| Complex64::new(i as f64, j as f64 + 0.5));
        let mut buf = vec![0.0; 8];
        pack_into(&a, &mut buf);
        assert_eq!(unpack(2, &buf), a);
        assert_eq!(from_pairs(&to_pairs(&a)).unwrap(), a);
    }

    #[test]
    fn expm_of_nilpotent() {
        let mut n = zeros(2);
        n[(0, 1)] = c(3.0);
        let e = expm(&n);
        assert!((e[(0, 1)] - c(3.0)).norm() < 1e-14);
        assert!((e[(0, 0)] - c(1.0)).norm() < 1e-14);
    }

    #[test]
    fn ragged_pairs_rejected() {
        let rows = vec![vec![[0.0, 0.0]; 2], vec![[0.0, 0.0]; 1]];
        assert!(from_pairs(&rows).is_none());
    }
}
