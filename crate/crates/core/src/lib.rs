//! Numerical laboratory for inertial manifolds of perturbed semilinear
//! parabolic problems `u' + A_eps u = F_eps(u)`.
//!
//! The crate builds inertial manifolds as fixed points of the
//! Lyapunov-Perron operator on a finite spectral model, checks the
//! intermediate linear estimates numerically, and measures how fast the
//! manifolds of a perturbed problem approach the unperturbed one.

pub mod error;
pub mod linalg;
pub mod quadrature;
pub mod nonlinearity;
pub mod spectral;
pub mod estimates;
pub mod manifold;
pub mod harness;

pub use error::{Error, Result};
