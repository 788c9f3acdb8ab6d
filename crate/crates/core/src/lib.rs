//! Numerics for the local heat kernel of a Laplace-type operator
//!
//! `A = -g^{-1/2} D_mu g^{1/2} g^{mu nu} D_nu - v`, `D_mu = d_mu + B_mu`
//!
//! on a single coordinate chart. The crate computes Synge's world function,
//! the Van Vleck-Morette determinant, off-diagonal Seeley-DeWitt
//! coefficients by transport along geodesics, the `Psi_k` function family,
//! and a flat-space Feynman-Kac Monte Carlo estimate of the kernel. The
//! [`verification`] module cross-checks all of them against independent
//! oracles.

pub mod error;
pub mod feynman_kac;
pub mod geometry;
pub mod linalg;
pub mod ode;
pub mod presets;
pub mod psi;
pub mod quad;
pub mod sdw;
pub mod special;
pub mod synge;
pub mod verification;

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{HeatError, Result};
pub use geometry::{ChartBox, Geodesic, LaplaceProblem, MatrixField, MetricField, Settings};
pub use linalg::CMat;
