//! Finite spectral model of the positive self-adjoint operators `A_eps`.
//!
//! Every operator is stored diagonally in its own orthonormal eigenbasis and
//! every [`StateVector`] holds coefficients in that eigenbasis. The basis
//! matrix records the eigenvectors in a fixed ambient frame, so maps between
//! the unperturbed and perturbed spaces (the comparison pair `E`, `M`) can be
//! given in the ambient frame and pulled back to eigen-coordinates.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::gauss_legendre;

const ORTHONORMAL_TOL: f64 = 1e-12;
const POLE_TOL: f64 = 1e-12;
const CONTOUR_MIN_DIST: f64 = 1e-6;
const MAX_GRAM_CONDITION: f64 = 1e8;
const COMPARISON_NORM_BOUND: f64 = 2.0;

/// Eigenvalues `lambda_1 <= ... <= lambda_N` (all `>= 1`) with an orthonormal
/// eigenbasis given column-wise in the ambient frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenData {
    eigenvalues: Vec<f64>,
    basis: DMatrix<f64>,
}

impl EigenData {
    pub fn new(eigenvalues: Vec<f64>, basis: DMatrix<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if n == 0 {
            return Err(Error::invalid("spectrum is empty"));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !l.is_finite() || **l <= 0.0) {
            return Err(Error::invalid(format!("eigenvalue {bad} is not positive")));
        }
        if eigenvalues[0] < 1.0 {
            return Err(Error::invalid(format!(
                "lambda_1 = {} < 1; shift the operator by a multiple of the identity first",
                eigenvalues[0]
            )));
        }
        if let Some(w) = eigenvalues.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "eigenvalues must be nondecreasing ({} then {})",
                w[0], w[1]
            )));
        }
        if basis.shape() != (n, n) {
            return Err(Error::invalid(format!(
                "basis is {:?}, expected {n}x{n}",
                basis.shape()
            )));
        }
        let gram = basis.transpose() * &basis;
        let defect = linalg::max_abs(&(gram - DMatrix::<f64>::identity(n, n)));
        if defect > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "basis columns are not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self { eigenvalues, basis })
    }

    /// Operator diagonal in the ambient frame (identity eigenbasis).
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        Self::new(eigenvalues, DMatrix::identity(n, n))
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Zero-based access: `lambda(0)` is the smallest eigenvalue.
    pub fn lambda(&self, i: usize) -> f64 {
        self.eigenvalues[i]
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Per-mode weights `lambda_i^alpha` of the fractional-power metric.
    pub fn weights(&self, alpha: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l.powf(alpha)).collect()
    }

    /// Distance from a complex point to the spectrum of `A`.
    pub fn distance_to_spectrum(&self, z: Complex64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&l| (z - l).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance from a complex point to the spectrum of `-A`.
    pub fn distance_to_neg_spectrum(&self, z: Complex64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&l| (z + l).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// `A^{-1}` as a diagonal matrix in eigen-coordinates.
    pub fn inverse_diag(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.len(), |i, j| {
            if i == j {
                1.0 / self.eigenvalues[i]
            } else {
                0.0
            }
        })
    }
}

/// The fractional exponent and the mode counts of a problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceContext {
    pub alpha: f64,
    pub n: usize,
    pub m: usize,
}

impl SpaceContext {
    pub fn new(alpha: f64, n: usize, m: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1)")));
        }
        if m < 1 || m >= n {
            return Err(Error::invalid(format!("need 1 <= m < N, got m = {m}, N = {n}")));
        }
        Ok(Self { alpha, n, m })
    }
}

/// Coefficients of a state in the owning operator's eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Euclidean (base-space) norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Which modes an operation acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Full,
    P,
    Q,
}

/// Splitting into the first `m` (slow) modes and the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSplit {
    m: usize,
    n: usize,
}

impl SpectralSplit {
    pub fn new(eigs: &EigenData, m: usize) -> Result<Self> {
        let n = eigs.len();
        if m == 0 || m > n {
            return Err(Error::invalid(format!("split m = {m} outside 1..={n}")));
        }
        if m < n && eigs.lambda(m - 1) >= eigs.lambda(m) {
            return Err(Error::invalid(format!(
                "no spectral gap at m = {m}: lambda_m = {} and lambda_(m+1) = {}",
                eigs.lambda(m - 1),
                eigs.lambda(m)
            )));
        }
        Ok(Self { m, n })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q_dim(&self) -> usize {
        self.n - self.m
    }

    fn range(&self, part: Part) -> std::ops::Range<usize> {
        match part {
            Part::Full => 0..self.n,
            Part::P => 0..self.m,
            Part::Q => self.m..self.n,
        }
    }

    /// The projection onto `part` as a diagonal 0/1 matrix in eigen-coordinates.
    pub fn projector(&self, part: Part) -> DMatrix<f64> {
        let r = self.range(part);
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j && r.contains(&i) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// `(sum_i v_i^2 lambda_i^{2 alpha})^{1/2}`.
pub fn frac_norm(v: &StateVector, alpha: f64, eigs: &EigenData) -> f64 {
    weighted_norm(v.as_slice(), eigs.eigenvalues(), alpha)
}

/// Fractional norm of a coefficient slice against leading eigenvalues
/// (the slice may be shorter than the spectrum, e.g. P-coordinates).
pub fn weighted_norm(v: &[f64], eigenvalues: &[f64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    v.iter()
        .zip(eigenvalues)
        .map(|(x, l)| x * x * l.powf(2.0 * alpha))
        .sum::<f64>()
        .sqrt()
}

/// `e^{-A t}` restricted to `part`. Negative times are only defined on the
/// finite-dimensional slow part.
pub fn semigroup_apply(
    eigs: &EigenData,
    t: f64,
    v: &StateVector,
    part: Part,
    split: &SpectralSplit,
) -> Result<StateVector> {
    if t < 0.0 && part != Part::P {
        return Err(Error::invalid(format!(
            "semigroup at t = {t} < 0 is only defined on the P part"
        )));
    }
    check_len(eigs, v)?;
    let range = split.range(part);
    let out = v
        .0
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if range.contains(&i) {
                x * (-eigs.lambda(i) * t).exp()
            } else {
                0.0
            }
        })
        .collect();
    Ok(StateVector(out))
}

/// `(lambda - A)^{-1} v`, mode by mode.
pub fn resolvent_apply(eigs: &EigenData, lambda: Complex64, v: &StateVector) -> Result<Vec<Complex64>> {
    check_len(eigs, v)?;
    for &l in eigs.eigenvalues() {
        if (lambda - l).norm() <= POLE_TOL {
            return Err(Error::Pole {
                lambda: format!("{lambda}"),
                eigenvalue: l,
            });
        }
    }
    Ok(v
        .0
        .iter()
        .zip(eigs.eigenvalues())
        .map(|(x, &l)| Complex64::new(*x, 0.0) / (lambda - l))
        .collect())
}

/// Orthogonal projection onto the P or Q modes.
pub fn project(split: &SpectralSplit, v: &StateVector, which: Part) -> StateVector {
    let r = split.range(which);
    StateVector(
        v.0.iter()
            .enumerate()
            .map(|(i, x)| if r.contains(&i) { *x } else { 0.0 })
            .collect(),
    )
}

fn check_len(eigs: &EigenData, v: &StateVector) -> Result<()> {
    if v.len() != eigs.len() {
        return Err(Error::invalid(format!(
            "state has {} coefficients, operator has {} modes",
            v.len(),
            eigs.len()
        )));
    }
    Ok(())
}

/// Direction of a comparison map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `E : X_0 -> X_eps`
    E,
    /// `M : X_eps -> X_0`
    M,
}

/// Extension/restriction maps between the unperturbed and perturbed spaces.
///
/// `e` and `m` act on eigen-coordinates (`e = V_eps^T E_ambient V_0`), and
/// `m` is computed as the inverse of `e` so that `M E = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonPair {
    e_ambient: DMatrix<f64>,
    e: DMatrix<f64>,
    m: DMatrix<f64>,
}

/// Operator norms of a comparison pair in the base and fractional metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairNorms {
    pub e_base: f64,
    pub m_base: f64,
    pub e_alpha: f64,
    pub m_alpha: f64,
}

impl ComparisonPair {
    /// Identity comparison on a shared eigenbasis.
    pub fn identity(n: usize) -> Self {
        Self {
            e_ambient: DMatrix::identity(n, n),
            e: DMatrix::identity(n, n),
            m: DMatrix::identity(n, n),
        }
    }

    /// Builds the pair from `E` in the ambient frame and checks `M E = I` and
    /// the norm bounds `||E||, ||M|| <= 2` in both metrics.
    pub fn new(
        eigs0: &EigenData,
        eigs_eps: &EigenData,
        e_ambient: DMatrix<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let n = eigs0.len();
        if eigs_eps.len() != n || e_ambient.shape() != (n, n) {
            return Err(Error::invalid("comparison pair dimensions disagree"));
        }
        let e = eigs_eps.basis().transpose() * &e_ambient * eigs0.basis();
        let m = e
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("E is not invertible"))?;
        let defect = linalg::max_abs(&(&m * &e - DMatrix::<f64>::identity(n, n)));
        if defect > 1e-12 {
            return Err(Error::invalid(format!("M E deviates from I by {defect:.3e}")));
        }
        let pair = Self { e_ambient, e, m };
        let norms = pair.norms(eigs0, eigs_eps, alpha);
        let worst = norms
            .e_base
            .max(norms.m_base)
            .max(norms.e_alpha)
            .max(norms.m_alpha);
        if worst > COMPARISON_NORM_BOUND {
            return Err(Error::invalid(format!(
                "comparison operator norm {worst:.4} exceeds 2 ({norms:?})"
            )));
        }
        Ok(pair)
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn e_ambient(&self) -> &DMatrix<f64> {
        &self.e_ambient
    }

    pub fn is_identity(&self) -> bool {
        let n = self.e.nrows();
        self.e == DMatrix::<f64>::identity(n, n)
    }

    pub fn norms(&self, eigs0: &EigenData, eigs_eps: &EigenData, alpha: f64) -> PairNorms {
        let w0 = eigs0.weights(alpha);
        let we = eigs_eps.weights(alpha);
        PairNorms {
            e_base: linalg::op_norm(&self.e),
            m_base: linalg::op_norm(&self.m),
            e_alpha: linalg::mixed_norm(&we, &self.e, &w0),
            m_alpha: linalg::mixed_norm(&w0, &self.m, &we),
        }
    }

    pub fn apply(&self, direction: Direction, v: &[f64]) -> Vec<f64> {
        let mat = match direction {
            Direction::E => &self.e,
            Direction::M => &self.m,
        };
        if direction == Direction::E && self.is_identity() {
            return v.to_vec();
        }
        (0..mat.nrows())
            .map(|i| (0..mat.ncols()).map(|j| mat[(i, j)] * v[j]).sum())
            .collect()
    }
}

/// Applies `E` or `M` to a state vector.
pub fn comparison_apply(pair: &ComparisonPair, direction: Direction, v: &StateVector) -> StateVector {
    StateVector(pair.apply(direction, v.as_slice()))
}

/// The coordinate isomorphism `j_eps` between the slow subspace `P_m^eps X_eps`
/// and `R^m`, in the basis `psi_i = P_m^eps(E phi_i^0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    m: usize,
    n: usize,
    psi: DMatrix<f64>,
    psi_inv: DMatrix<f64>,
    identity: bool,
}

impl CoordinateMap {
    pub fn new(split: &SpectralSplit, pair: &ComparisonPair) -> Result<Self> {
        let m = split.m();
        let n = split.n();
        if pair.e().nrows() != n {
            return Err(Error::invalid("coordinate map dimensions disagree"));
        }
        let psi = pair.e().view((0, 0), (m, m)).into_owned();
        // Condition of the Gram matrix, measured against the unit-normalised
        // reference basis so that a uniformly shrunken basis also counts.
        let gram = psi.transpose() * &psi;
        let sv = linalg::singular_values(&gram);
        let lo = sv.last().copied().unwrap_or(0.0);
        let condition = if lo > 0.0 { sv[0].max(1.0) / lo } else { f64::INFINITY };
        if !(condition <= MAX_GRAM_CONDITION) {
            return Err(Error::DegenerateBasis { condition });
        }
        let psi_inv = psi
            .clone()
            .try_inverse()
            .ok_or(Error::DegenerateBasis { condition })?;
        let identity = psi == DMatrix::<f64>::identity(m, m);
        Ok(Self {
            m,
            n,
            psi,
            psi_inv,
            identity,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Coordinates `p_bar` of a slow-mode vector given by its first `m`
    /// eigen-coefficients.
    pub fn coords_of(&self, p: &[f64]) -> Vec<f64> {
        if self.identity {
            return p[..self.m].to_vec();
        }
        (0..self.m)
            .map(|i| (0..self.m).map(|j| self.psi_inv[(i, j)] * p[j]).sum())
            .collect()
    }

    /// First `m` eigen-coefficients of `j_eps^{-1}(p_bar)`.
    pub fn slow_of(&self, p_bar: &[f64]) -> Vec<f64> {
        if self.identity {
            return p_bar.to_vec();
        }
        (0..self.m)
            .map(|i| (0..self.m).map(|j| self.psi[(i, j)] * p_bar[j]).sum())
            .collect()
    }

    /// `j_eps(v)` for `v` in the range of `P_m^eps` (Q coefficients are ignored).
    pub fn coord_map(&self, v: &StateVector) -> Vec<f64> {
        self.coords_of(&v.0[..self.m])
    }

    /// `j_eps^{-1}(p_bar)` as a full state vector.
    pub fn from_coords(&self, p_bar: &[f64]) -> StateVector {
        let mut out = vec![0.0; self.n];
        out[..self.m].copy_from_slice(&self.slow_of(p_bar));
        StateVector(out)
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }
}

/// `|p_bar|_alpha = (sum_i p_i^2 lambda_i^{2 alpha})^{1/2}` over the first `m` modes.
pub fn coord_norm(p_bar: &[f64], alpha: f64, eigs: &EigenData) -> f64 {
    weighted_norm(p_bar, eigs.eigenvalues(), alpha)
}

/// A closed (rectangle) or sectorial integration contour in the complex plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Contour {
    /// Axis-aligned rectangle `[re_min, re_max] x [-im_half, im_half]`,
    /// traversed counterclockwise.
    Rectangle {
        re_min: f64,
        re_max: f64,
        im_half: f64,
        nodes: usize,
    },
    /// Boundary of `{|arg(z - vertex)| <= pi - half_angle}`, traversed with
    /// increasing imaginary part; it encloses the part of the real axis left
    /// of the vertex.
    Sector {
        vertex: f64,
        half_angle: f64,
        nodes: usize,
    },
}

impl Contour {
    /// The rectangle around `-lambda_1^0, ..., -lambda_m^0` with
    /// `Re in [-lambda_m - 1, -lambda_1 + 1]` and `|Im| <= 1`.
    pub fn slow_rectangle(eigs0: &EigenData, m: usize, nodes: usize) -> Self {
        Contour::Rectangle {
            re_min: -eigs0.lambda(m - 1) - 1.0,
            re_max: -eigs0.lambda(0) + 1.0,
            im_half: 1.0,
            nodes,
        }
    }

    /// Sector boundary with vertex `-lambda_{m+1}^0 + 1` and half-angle pi/4,
    /// enclosing the fast spectrum of `-A`.
    pub fn fast_sector(eigs0: &EigenData, m: usize, nodes: usize) -> Self {
        Contour::Sector {
            vertex: -eigs0.lambda(m) + 1.0,
            half_angle: PI / 4.0,
            nodes,
        }
    }

    /// Length of a rectangle; infinite for a sector.
    pub fn length(&self) -> f64 {
        match *self {
            Contour::Rectangle {
                re_min,
                re_max,
                im_half,
                ..
            } => 2.0 * (re_max - re_min) + 4.0 * im_half,
            Contour::Sector { .. } => f64::INFINITY,
        }
    }

    /// Straight pieces of a rectangle in counterclockwise order.
    pub fn segments(&self) -> Vec<(Complex64, Complex64)> {
        match *self {
            Contour::Rectangle {
                re_min,
                re_max,
                im_half,
                ..
            } => {
                let a = Complex64::new(re_min, -im_half);
                let b = Complex64::new(re_max, -im_half);
                let c = Complex64::new(re_max, im_half);
                let d = Complex64::new(re_min, im_half);
                vec![(a, b), (b, c), (c, d), (d, a)]
            }
            Contour::Sector { .. } => Vec::new(),
        }
    }

    /// Minimum distance from the contour to the spectrum of `-A`.
    pub fn distance_to_neg_spectrum(&self, eigs: &EigenData) -> f64 {
        match *self {
            Contour::Rectangle { .. } => self
                .segments()
                .iter()
                .flat_map(|&(a, b)| {
                    eigs.eigenvalues()
                        .iter()
                        .map(move |&l| point_segment_distance(Complex64::new(-l, 0.0), a, b))
                })
                .fold(f64::INFINITY, f64::min),
            Contour::Sector {
                vertex, half_angle, ..
            } => eigs
                .eigenvalues()
                .iter()
                .map(|&l| {
                    let x = -l - vertex;
                    // Left of the vertex the rays are nearest along their normal.
                    if x < 0.0 {
                        -x * half_angle.sin()
                    } else {
                        x
                    }
                })
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Number of eigenvalues of `-A` strictly inside a rectangle.
    pub fn enclosed_count(&self, eigs: &EigenData) -> usize {
        match *self {
            Contour::Rectangle {
                re_min, re_max, ..
            } => eigs
                .eigenvalues()
                .iter()
                .filter(|&&l| -l > re_min && -l < re_max)
                .count(),
            Contour::Sector { vertex, .. } => eigs
                .eigenvalues()
                .iter()
                .filter(|&&l| -l < vertex)
                .count(),
        }
    }

    /// Gauss-Legendre nodes `z_k` and complex weights `dz_k` on a rectangle.
    fn rectangle_rule(&self) -> Vec<(Complex64, Complex64)> {
        let Contour::Rectangle { nodes, .. } = *self else {
            return Vec::new();
        };
        let (x, w) = gauss_legendre(nodes);
        let mut out = Vec::with_capacity(4 * nodes);
        for (a, b) in self.segments() {
            let half = (b - a) * 0.5;
            let mid = (a + b) * 0.5;
            for (xi, wi) in x.iter().zip(&w) {
                out.push((mid + half * *xi, half * *wi));
            }
        }
        out
    }
}

fn point_segment_distance(p: Complex64, a: Complex64, b: Complex64) -> f64 {
    let ab = b - a;
    let t = ((p - a).re * ab.re + (p - a).im * ab.im) / ab.norm_sqr();
    let t = t.clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Spectral projection `(1/2 pi i) \oint (A + lambda I)^{-1} d lambda` by
/// Gauss-Legendre quadrature on each side of a rectangle, returned in the
/// ambient frame.
pub fn contour_projection(eigs: &EigenData, contour: &Contour) -> Result<DMatrix<f64>> {
    if !matches!(contour, Contour::Rectangle { .. }) {
        return Err(Error::invalid(
            "spectral projection needs a closed (rectangle) contour",
        ));
    }
    let distance = contour.distance_to_neg_spectrum(eigs);
    if distance < CONTOUR_MIN_DIST {
        return Err(Error::ContourTooClose { distance });
    }
    let rule = contour.rectangle_rule();
    let two_pi_i = Complex64::new(0.0, 2.0 * PI);
    let coeff: Vec<f64> = eigs
        .eigenvalues()
        .iter()
        .map(|&l| {
            let s: Complex64 = rule.iter().map(|&(z, dz)| dz / (z + l)).sum();
            (s / two_pi_i).re
        })
        .collect();
    Ok(in_ambient(eigs, &coeff))
}

/// Semigroup `(1/2 pi i) \int_Gamma (lambda + A)^{-1} e^{lambda t} d lambda`
/// over a sector boundary for `t > 0`, returned in the ambient frame. The rays
/// are truncated where the discarded tail falls below 1e-12.
pub fn contour_semigroup(eigs: &EigenData, contour: &Contour, t: f64) -> Result<DMatrix<f64>> {
    let Contour::Sector {
        vertex,
        half_angle,
        nodes,
    } = *contour
    else {
        return Err(Error::invalid("contour semigroup needs a sector contour"));
    };
    if t <= 0.0 {
        return Err(Error::invalid(format!("contour semigroup needs t > 0, got {t}")));
    }
    let distance = contour.distance_to_neg_spectrum(eigs);
    if distance < CONTOUR_MIN_DIST {
        return Err(Error::ContourTooClose { distance });
    }
    let cos_phi = half_angle.cos();
    // Tail of 2 * (1/2pi) * \int_R^inf e^{(b - r cos phi) t} / dist dr below 1e-12.
    let scale = (vertex * t).exp() / (PI * cos_phi * t * distance);
    let r_max = ((scale / 1e-12).ln() / (cos_phi * t)).max(1.0);

    let theta = PI - half_angle;
    let up = Complex64::from_polar(1.0, theta);
    let down = Complex64::from_polar(1.0, -theta);
    let (x, w) = gauss_legendre(nodes);
    // Geometric panels resolve both the O(1) scale near the vertex and the
    // 1/t decay scale.
    let mut panels = vec![0.0];
    let mut edge = 0.25_f64.min(r_max);
    while edge < r_max {
        panels.push(edge);
        edge *= 2.0;
    }
    panels.push(r_max);

    let coeff: Vec<f64> = eigs
        .eigenvalues()
        .iter()
        .map(|&l| {
            let mut s = Complex64::new(0.0, 0.0);
            for pair in panels.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                for (xi, wi) in x.iter().zip(&w) {
                    let r = mid + half * xi;
                    let z_up = vertex + up * r;
                    let z_down = vertex + down * r;
                    let g_up = (z_up * t).exp() / (z_up + l) * up;
                    let g_down = (z_down * t).exp() / (z_down + l) * down;
                    s += (g_up - g_down) * (half * wi);
                }
            }
            (s / Complex64::new(0.0, 2.0 * PI)).re
        })
        .collect();
    Ok(in_ambient(eigs, &coeff))
}

/// `V diag(coeff) V^T`.
fn in_ambient(eigs: &EigenData, coeff: &[f64]) -> DMatrix<f64> {
    let v = eigs.basis();
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * coeff[j]);
    scaled * v.transpose()
}

/// Direct spectral projector onto the first `m` eigenvectors, ambient frame.
pub fn direct_projection(eigs: &EigenData, m: usize) -> DMatrix<f64> {
    let coeff: Vec<f64> = (0..eigs.len()).map(|i| if i < m { 1.0 } else { 0.0 }).collect();
    in_ambient(eigs, &coeff)
}

/// JSON form of an operator and (optionally) its comparison map:
/// `{"eigenvalues": [...], "basis": [[...]], "E": [[...]]}`, matrices row-major;
/// a missing `basis` or `E` means the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralDocument {
    pub eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
}

impl SpectralDocument {
    pub fn from_parts(eigs: &EigenData, pair: Option<&ComparisonPair>) -> Self {
        let n = eigs.len();
        let basis = (eigs.basis() != &DMatrix::<f64>::identity(n, n)).then(|| to_rows(eigs.basis()));
        let e = pair
            .filter(|p| p.e_ambient() != &DMatrix::<f64>::identity(n, n))
            .map(|p| to_rows(p.e_ambient()));
        Self {
            eigenvalues: eigs.eigenvalues().to_vec(),
            basis,
            e,
        }
    }

    pub fn eigen_data(&self) -> Result<EigenData> {
        let n = self.eigenvalues.len();
        let basis = match &self.basis {
            Some(rows) => from_rows(rows, n)?,
            None => DMatrix::identity(n, n),
        };
        EigenData::new(self.eigenvalues.clone(), basis)
    }

    /// The comparison pair relating `eigs0` to the operator described here.
    pub fn comparison_pair(&self, eigs0: &EigenData, alpha: f64) -> Result<ComparisonPair> {
        let eigs = self.eigen_data()?;
        let n = eigs.len();
        let e = match &self.e {
            Some(rows) => from_rows(rows, n)?,
            None => DMatrix::identity(n, n),
        };
        ComparisonPair::new(eigs0, &eigs, e, alpha)
    }
}

fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!("matrix must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}
