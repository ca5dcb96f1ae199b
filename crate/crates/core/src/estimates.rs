//! Perturbation sizes, gap conditions and numerical verifiers for the linear
//! estimates that drive the manifold-distance bound.
//!
//! All operators are diagonal in their own eigenbases, so the operator
//! norms `L(X_0, X_eps^alpha)` below are exact: they are largest singular
//! values of `diag(lambda_eps^alpha) T` for the eigen-coordinate matrix `T`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{integrate, integrate_to_infinity};
use crate::spectral::{
    contour_projection, weighted_norm, ComparisonPair, Contour, CoordinateMap, EigenData, Part,
    SpectralSplit,
};

/// Relative and absolute slack of the "measured <= bound" comparisons.
const REL_SLACK: f64 = 1e-9;
const ABS_SLACK: f64 = 1e-13;
const QUAD_TOL: f64 = 1e-9;
const SECTOR_ANGLE: f64 = PI / 4.0;

/// `|A_eps^{-1} E - E A_0^{-1}|_{L(X_0, X_eps^alpha)}`.
pub fn tau_of(eigs_eps: &EigenData, eigs_0: &EigenData, pair: &ComparisonPair, alpha: f64) -> f64 {
    let d = eigs_eps.inverse_diag() * pair.e() - pair.e() * eigs_0.inverse_diag();
    let ones = vec![1.0; eigs_0.len()];
    linalg::mixed_norm(&eigs_eps.weights(alpha), &d, &ones)
}

/// Closed form of `tau` for operators sharing one eigenbasis with `E = I`:
/// `max_i (lambda_i^eps)^alpha |1/lambda_i^eps - 1/lambda_i^0|`.
pub fn tau_diagonal(eigs_eps: &EigenData, eigs_0: &EigenData, alpha: f64) -> f64 {
    eigs_eps
        .eigenvalues()
        .iter()
        .zip(eigs_0.eigenvalues())
        .map(|(&le, &l0)| le.powf(alpha) * ((le - l0) / (le * l0)).abs())
        .fold(0.0, f64::max)
}

/// `min{tau / t, t^{-alpha}}`.
pub fn l_eps_alpha(t: f64, tau: f64, alpha: f64) -> f64 {
    assert!(t > 0.0, "l_eps_alpha needs t > 0");
    (tau / t).min(t.powf(-alpha))
}

/// Rate function `B = tau max(|ln tau|, 1) + rho`, equal to `rho` when `tau = 0`.
pub fn rate_bound(tau: f64, rho: f64) -> f64 {
    if tau == 0.0 {
        rho
    } else {
        tau * tau.ln().abs().max(1.0) + rho
    }
}

/// `(1 + |l| / dist(l, sigma(-A_eps))) (1 + |l| / dist(l, sigma(-A_0)))`.
pub fn c3_of(lambda: Complex64, eigs_eps: &EigenData, eigs_0: &EigenData) -> Result<f64> {
    let de = eigs_eps.distance_to_neg_spectrum(lambda);
    let d0 = eigs_0.distance_to_neg_spectrum(lambda);
    for (d, eigs) in [(de, eigs_eps), (d0, eigs_0)] {
        if d <= 1e-12 {
            let nearest = eigs
                .eigenvalues()
                .iter()
                .copied()
                .min_by(|a, b| (lambda + a).norm().total_cmp(&(lambda + b).norm()))
                .unwrap_or(f64::NAN);
            return Err(Error::Pole {
                lambda: format!("{lambda}"),
                eigenvalue: -nearest,
            });
        }
    }
    let r = lambda.norm();
    Ok((1.0 + r / de) * (1.0 + r / d0))
}

/// Margins (left side minus right side) of the gap conditions at one `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMargins {
    pub m: usize,
    /// `lambda_{m+1}^0 - lambda_m^0 - 12 L_F (lambda_m^alpha + lambda_{m+1}^alpha)`
    pub gap_base: f64,
    /// `(lambda_m^0)^{1-alpha} - 24 L_F / (1 - alpha)`
    pub power_base: f64,
    /// `(lambda_m^eps)^{1-alpha} - 12 L_F / (1 - alpha)`
    pub power_eps: f64,
    /// `lambda_{m+1}^eps - lambda_m^eps - 6 L_F (...)`
    pub gap_eps: f64,
    /// `lambda_{m+1} - lambda_m - 3` for the perturbed and unperturbed spectra.
    pub separation_eps: f64,
    pub separation_base: f64,
}

impl GapMargins {
    pub fn admissible(&self) -> bool {
        [
            self.gap_base,
            self.power_base,
            self.power_eps,
            self.gap_eps,
            self.separation_eps,
            self.separation_base,
        ]
        .iter()
        .all(|x| *x >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub l_f: f64,
    pub alpha: f64,
    pub margins: Vec<GapMargins>,
    pub admissible: Vec<usize>,
    pub chosen: Option<usize>,
}

impl GapReport {
    pub fn margins_at(&self, m: usize) -> Option<&GapMargins> {
        self.margins.iter().find(|g| g.m == m)
    }
}

fn power_margin(lambda: f64, l_f: f64, alpha: f64, factor: f64) -> f64 {
    lambda.powf(1.0 - alpha) - factor * l_f / (1.0 - alpha)
}

fn gap_margin(lo: f64, hi: f64, l_f: f64, alpha: f64, factor: f64) -> f64 {
    hi - lo - factor * l_f * (lo.powf(alpha) + hi.powf(alpha))
}

/// Scans `m = 1 .. N-1` and records every margin; the smallest admissible `m`
/// is chosen. An empty admissible set is a valid result.
pub fn gap_check(eigs_0: &EigenData, eigs_eps: &EigenData, l_f: f64, alpha: f64) -> GapReport {
    let n = eigs_0.len().min(eigs_eps.len());
    let margins: Vec<GapMargins> = (1..n)
        .map(|m| {
            let (l0m, l0n) = (eigs_0.lambda(m - 1), eigs_0.lambda(m));
            let (lem, len) = (eigs_eps.lambda(m - 1), eigs_eps.lambda(m));
            GapMargins {
                m,
                gap_base: gap_margin(l0m, l0n, l_f, alpha, 12.0),
                power_base: power_margin(l0m, l_f, alpha, 24.0),
                power_eps: power_margin(lem, l_f, alpha, 12.0),
                gap_eps: gap_margin(lem, len, l_f, alpha, 6.0),
                separation_eps: len - lem - 3.0,
                separation_base: l0n - l0m - 3.0,
            }
        })
        .collect();
    let admissible: Vec<usize> = margins.iter().filter(|g| g.admissible()).map(|g| g.m).collect();
    GapReport {
        l_f,
        alpha,
        chosen: admissible.first().copied(),
        margins,
        admissible,
    }
}

/// The existence conditions for one operator: `lambda_m^{1-alpha} >= 12 L_F/(1-alpha)`
/// and `lambda_{m+1} - lambda_m >= 6 L_F (lambda_m^alpha + lambda_{m+1}^alpha)`.
pub fn require_gap_conditions(eigs: &EigenData, m: usize, l_f: f64, alpha: f64) -> Result<()> {
    if m == 0 || m >= eigs.len() {
        return Err(Error::GapCondition {
            reason: format!("m = {m} leaves no slow or no fast modes"),
            context: String::new(),
        });
    }
    let (lm, ln) = (eigs.lambda(m - 1), eigs.lambda(m));
    let p = power_margin(lm, l_f, alpha, 12.0);
    let g = gap_margin(lm, ln, l_f, alpha, 6.0);
    if p < 0.0 || g < 0.0 {
        return Err(Error::GapCondition {
            reason: format!(
                "m = {m}, L_F = {l_f:.6e}: power margin {p:.4e}, gap margin {g:.4e}"
            ),
            context: String::new(),
        });
    }
    Ok(())
}

/// Contour constants of the comparison estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourConstants {
    /// Length of the rectangle around the slow spectrum.
    pub gamma_length: f64,
    pub sup_c3_rectangle: f64,
    /// `C_P = C_4 = |Gamma| / (2 pi) sup_Gamma C_3`.
    pub c_p: f64,
    pub c_4: f64,
    pub sup_c3_sector: f64,
    /// `C_5 = max{sup_{Gamma_m} C_3 / (pi cos(pi/4)), 4}`.
    pub c_5: f64,
}

/// Sup of `C_3` sampled on the rectangle and the fast sector of the
/// unperturbed spectrum (dense sampling plus the points nearest each eigenvalue).
pub fn contour_constants(eigs_eps: &EigenData, eigs_0: &EigenData, m: usize) -> Result<ContourConstants> {
    let rect = Contour::slow_rectangle(eigs_0, m, 1);
    let Contour::Rectangle {
        re_min,
        re_max,
        im_half,
        ..
    } = rect
    else {
        unreachable!()
    };
    let mut points: Vec<Complex64> = Vec::new();
    let samples = 4000;
    for k in 0..=samples {
        let s = k as f64 / samples as f64;
        let x = re_min + s * (re_max - re_min);
        let y = -im_half + s * 2.0 * im_half;
        points.push(Complex64::new(x, im_half));
        points.push(Complex64::new(x, -im_half));
        points.push(Complex64::new(re_min, y));
        points.push(Complex64::new(re_max, y));
    }
    for eigs in [eigs_0, eigs_eps] {
        for &l in eigs.eigenvalues() {
            if -l >= re_min && -l <= re_max {
                points.push(Complex64::new(-l, im_half));
                points.push(Complex64::new(-l, -im_half));
            }
        }
    }
    let mut sup_rect = 0.0_f64;
    for z in &points {
        sup_rect = sup_rect.max(c3_of(*z, eigs_eps, eigs_0)?);
    }

    let b = -eigs_0.lambda(m) + 1.0;
    let dir = Complex64::from_polar(1.0, PI - SECTOR_ANGLE);
    let top = eigs_0.lambda(eigs_0.len() - 1).max(eigs_eps.lambda(eigs_eps.len() - 1));
    let mut radii: Vec<f64> = (0..=5000).map(|k| k as f64 * 0.01).collect();
    radii.extend((0..=4000).map(|k| 50.0 * (1e3 * top / 50.0).powf(k as f64 / 4000.0)));
    for eigs in [eigs_0, eigs_eps] {
        for &l in eigs.eigenvalues() {
            let x = -l - b;
            if x < 0.0 {
                radii.push(-x * SECTOR_ANGLE.cos());
            }
        }
    }
    let mut sup_sector = 0.0_f64;
    for r in radii {
        sup_sector = sup_sector.max(c3_of(b + dir * r, eigs_eps, eigs_0)?);
    }
    let gamma_length = rect.length();
    let c_p = gamma_length / (2.0 * PI) * sup_rect;
    Ok(ContourConstants {
        gamma_length,
        sup_c3_rectangle: sup_rect,
        c_p,
        c_4: c_p,
        sup_c3_sector: sup_sector,
        c_5: (sup_sector / (PI * SECTOR_ANGLE.cos())).max(4.0),
    })
}

/// Outcome of a numerical check of one inequality family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheckReport {
    pub lemma: String,
    pub grid: String,
    pub samples: usize,
    pub worst_ratio: f64,
    pub violations: usize,
}

impl LemmaCheckReport {
    fn new(lemma: &str, grid: impl Into<String>) -> Self {
        Self {
            lemma: lemma.to_string(),
            grid: grid.into(),
            samples: 0,
            worst_ratio: 0.0,
            violations: 0,
        }
    }

    /// Records `measured <= bound`.
    pub fn record(&mut self, measured: f64, bound: f64) {
        self.samples += 1;
        let ratio = if measured == 0.0 && bound == 0.0 {
            0.0
        } else if bound == 0.0 {
            f64::INFINITY
        } else {
            measured / bound
        };
        if ratio.is_nan() || ratio > self.worst_ratio {
            self.worst_ratio = ratio;
        }
        if !(measured <= bound * (1.0 + REL_SLACK) + ABS_SLACK) {
            self.violations += 1;
        }
    }

    /// Records a hard failure that has no ratio (e.g. a rank mismatch).
    pub fn fail(&mut self) {
        self.samples += 1;
        self.violations += 1;
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Combines reports of the same lemma.
    pub fn merge(&mut self, other: &LemmaCheckReport) {
        self.samples += other.samples;
        self.violations += other.violations;
        if other.worst_ratio.is_nan() || other.worst_ratio > self.worst_ratio {
            self.worst_ratio = other.worst_ratio;
        }
        if !self.grid.contains(&other.grid) {
            self.grid = format!("{}; {}", self.grid, other.grid);
        }
    }
}

fn diag_exp(eigs: &EigenData, t: f64, part: Part, m: usize) -> DMatrix<f64> {
    let n = eigs.len();
    DMatrix::from_fn(n, n, |i, j| {
        let keep = match part {
            Part::Full => true,
            Part::P => i < m,
            Part::Q => i >= m,
        };
        if i == j && keep {
            (-eigs.lambda(i) * t).exp()
        } else {
            0.0
        }
    })
}

/// Semigroup decay: `|e^{-At}|_{L(X)} <= e^{-lambda_1 t}` and
/// `|e^{-At}|_{L(X, X^alpha)} <= e^{-lambda_1 t} max{lambda_1, alpha/t}^alpha` on `t_grid`.
pub fn verify_semigroup_decay(eigs: &EigenData, alpha: f64, t_grid: &[f64]) -> LemmaCheckReport {
    let mut rep = LemmaCheckReport::new("3.1", grid_label(t_grid));
    let n = eigs.len();
    let ones = vec![1.0; n];
    let w = eigs.weights(alpha);
    let l1 = eigs.lambda(0);
    for &t in t_grid {
        let s = diag_exp(eigs, t, Part::Full, 0);
        rep.record(linalg::op_norm(&s), (-l1 * t).exp());
        let bound = (-l1 * t).exp() * l1.max(alpha / t).powf(alpha);
        rep.record(linalg::mixed_norm(&w, &s, &ones), bound);
    }
    rep
}

fn resolvent_diag(eigs: &EigenData, lambda: Complex64) -> DMatrix<Complex64> {
    let n = eigs.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(1.0, 0.0) / (lambda + eigs.lambda(i))
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// The resolvent identity
/// `(l + A_eps)^{-1} E - E (l + A_0)^{-1} = [I - l (l + A_eps)^{-1}] (A_eps^{-1} E - E A_0^{-1}) [I - l (l + A_0)^{-1}]`
/// (entrywise to 1e-10) and the bound `|LHS|_{L(X_0, X_eps^alpha)} <= C_3(l) tau`.
pub fn verify_resolvent_identity(
    eigs_eps: &EigenData,
    eigs_0: &EigenData,
    pair: &ComparisonPair,
    alpha: f64,
    lambdas: &[Complex64],
) -> Result<LemmaCheckReport> {
    let mut rep = LemmaCheckReport::new("3.4", format!("{} points", lambdas.len()));
    let n = eigs_0.len();
    let tau = tau_of(eigs_eps, eigs_0, pair, alpha);
    let e = pair.e().map(|x| Complex64::new(x, 0.0));
    let diff = (eigs_eps.inverse_diag() * pair.e() - pair.e() * eigs_0.inverse_diag())
        .map(|x| Complex64::new(x, 0.0));
    let id = DMatrix::<Complex64>::identity(n, n);
    let ones = vec![1.0; n];
    let w = eigs_eps.weights(alpha);
    for &l in lambdas {
        let c3 = c3_of(l, eigs_eps, eigs_0)?;
        let re = resolvent_diag(eigs_eps, l);
        let r0 = resolvent_diag(eigs_0, l);
        let lhs = &re * &e - &e * &r0;
        let rhs = (&id - &re * l) * &diff * (&id - &r0 * l);
        let defect = linalg::max_abs_complex(&(&lhs - &rhs));
        if defect > 1e-10 {
            rep.fail();
        } else {
            rep.samples += 1;
        }
        rep.record(linalg::mixed_norm_complex(&w, &lhs, &ones), c3 * tau);
    }
    Ok(rep)
}

/// `|P^eps E - E P^0|_{L(X_0, X_eps^alpha)} <= C_P tau`, plus the rank of the
/// contour projector of `A_eps` (must equal `m`).
pub fn verify_projection_distance(
    eigs_eps: &EigenData,
    eigs_0: &EigenData,
    pair: &ComparisonPair,
    m: usize,
    alpha: f64,
    tau: f64,
) -> Result<LemmaCheckReport> {
    let mut rep = LemmaCheckReport::new("3.7", format!("m = {m}"));
    let split_e = SpectralSplit::new(eigs_eps, m)?;
    let split_0 = SpectralSplit::new(eigs_0, m)?;
    let d = split_e.projector(Part::P) * pair.e() - pair.e() * split_0.projector(Part::P);
    let ones = vec![1.0; eigs_0.len()];
    let measured = linalg::mixed_norm(&eigs_eps.weights(alpha), &d, &ones);
    let k = contour_constants(eigs_eps, eigs_0, m)?;
    rep.record(measured, k.c_p * tau);
    let contour = Contour::slow_rectangle(eigs_0, m, 256);
    let proj = contour_projection(eigs_eps, &contour)?;
    if linalg::numerical_rank(&proj, 0.5) != m {
        rep.fail();
    }
    Ok(rep)
}

/// Semigroup comparison on `t_grid`:
/// * `Full`: `|e^{-A_eps t} E - E e^{-A_0 t}| <= 4 l(t)`, `t > 0`;
/// * `P`: `|e^{-A_eps t} P^eps E - E e^{-A_0 t} P^0| <= C_4 e^{-(lambda_m^0 + 1) t} tau`, `t <= 0`;
/// * `Q`: `|e^{-A_eps t} Q^eps E - E e^{-A_0 t} Q^0| <= C_5 e^{-(lambda_{m+1}^0 - 1) t} l(t)`, `t > 0`.
#[allow(clippy::too_many_arguments)]
pub fn verify_semigroup_distance(
    eigs_eps: &EigenData,
    eigs_0: &EigenData,
    pair: &ComparisonPair,
    m: usize,
    alpha: f64,
    tau: f64,
    t_grid: &[f64],
    which: Part,
) -> Result<LemmaCheckReport> {
    let lemma = match which {
        Part::Full => "3.9",
        Part::P => "5.1",
        Part::Q => "5.3",
    };
    let mut rep = LemmaCheckReport::new(lemma, grid_label(t_grid));
    for &t in t_grid {
        let ok = match which {
            Part::P => t <= 0.0,
            _ => t > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("t = {t} outside the domain of lemma {lemma}")));
        }
    }
    let constants = match which {
        Part::Full => None,
        _ => Some(contour_constants(eigs_eps, eigs_0, m)?),
    };
    let ones = vec![1.0; eigs_0.len()];
    let w = eigs_eps.weights(alpha);
    for &t in t_grid {
        let d = diag_exp(eigs_eps, t, which, m) * pair.e() - pair.e() * diag_exp(eigs_0, t, which, m);
        let measured = linalg::mixed_norm(&w, &d, &ones);
        let bound = match (which, constants) {
            (Part::Full, _) => 4.0 * l_eps_alpha(t, tau, alpha),
            (Part::P, Some(k)) => k.c_4 * (-(eigs_0.lambda(m - 1) + 1.0) * t).exp() * tau,
            (Part::Q, Some(k)) => {
                k.c_5 * (-(eigs_0.lambda(m) - 1.0) * t).exp() * l_eps_alpha(t, tau, alpha)
            }
            _ => unreachable!(),
        };
        rep.record(measured, bound);
    }
    Ok(rep)
}

/// `\int_0^t (t-s)^{-gamma} l(s) ds`, with substitutions removing both
/// endpoint singularities.
pub fn kernel_integral(t: f64, tau: f64, alpha: f64, gamma: f64) -> f64 {
    let l = |s: f64| if s > 0.0 { l_eps_alpha(s, tau, alpha) } else { 0.0 };
    let half = 0.5 * t;
    // s = x^{1/(1-alpha)} on [0, t/2].
    let pa = 1.0 / (1.0 - alpha);
    let left = integrate(
        |x: f64| {
            if x <= 0.0 {
                return pa * t.powf(-gamma);
            }
            let s = x.powf(pa);
            (t - s).powf(-gamma) * l(s) * pa * x.powf(pa - 1.0)
        },
        0.0,
        half.powf(1.0 - alpha),
        QUAD_TOL,
    );
    // t - s = y^{1/(1-gamma)} on [t/2, t].
    let pg = 1.0 / (1.0 - gamma);
    let right = integrate(
        |y: f64| pg * l(t - y.powf(pg)),
        0.0,
        half.powf(1.0 - gamma),
        QUAD_TOL,
    );
    left.value + right.value
}

/// `\int_0^t e^{-a s} l(s) ds` (`t = inf` allowed).
pub fn damped_integral(t: f64, tau: f64, alpha: f64, a: f64) -> f64 {
    let pa = 1.0 / (1.0 - alpha);
    let head_end = t.min(1.0);
    let head = integrate(
        |x: f64| {
            if x <= 0.0 {
                return pa;
            }
            let s = x.powf(pa);
            (-a * s).exp() * l_eps_alpha(s, tau, alpha) * pa * x.powf(pa - 1.0)
        },
        0.0,
        head_end.powf(1.0 - alpha),
        QUAD_TOL,
    )
    .value;
    if t <= 1.0 {
        return head;
    }
    let f = |s: f64| (-a * s).exp() * l_eps_alpha(s, tau, alpha);
    let tail = if t.is_infinite() {
        integrate_to_infinity(f, 1.0, QUAD_TOL).value
    } else {
        integrate(f, 1.0, t, QUAD_TOL).value
    };
    head + tail
}

/// `\int_0^inf e^{-a s} max{lambda, alpha/s}^alpha ds`.
pub fn exponential_max_integral(lambda: f64, alpha: f64, a: f64) -> f64 {
    let f = |s: f64| (-a * s).exp() * lambda.max(alpha / s).powf(alpha);
    let knee = if alpha > 0.0 { alpha / lambda } else { 0.0 };
    let head = if knee > 0.0 {
        let pa = 1.0 / (1.0 - alpha);
        integrate(
            |x: f64| {
                if x <= 0.0 {
                    return alpha.powf(alpha) * pa;
                }
                let s = x.powf(pa);
                f(s) * pa * x.powf(pa - 1.0)
            },
            0.0,
            knee.powf(1.0 - alpha),
            QUAD_TOL,
        )
        .value
    } else {
        0.0
    };
    head + integrate_to_infinity(f, knee, QUAD_TOL).value
}

/// The three integral estimates of the kernel `l` on `t_grid` (together with
/// the `t = 1` form of the first), for `tau in (0, 1)`.
pub fn verify_integral_bounds(
    tau: f64,
    alpha: f64,
    gamma: f64,
    a: f64,
    t_grid: &[f64],
) -> Result<LemmaCheckReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau = {tau} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&gamma) || !(a > 0.0) || !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid("need 0 <= gamma < 1, 0 <= alpha < 1, a > 0"));
    }
    let mut rep = LemmaCheckReport::new(
        "3.10",
        format!("tau = {tau:e}, gamma = {gamma}, a = {a}, {}", grid_label(t_grid)),
    );
    let lt = tau.ln().abs();
    for &t in t_grid {
        let lg = t.ln().abs();
        let first = 2f64.powf(gamma) / ((1.0 - gamma) * (1.0 - alpha)) * t.powf(-gamma) * (lg + lt) * tau;
        rep.record(kernel_integral(t, tau, alpha, gamma), first);
        let second = 2.0 / (1.0 - alpha) * (lg + lt) * tau;
        rep.record(damped_integral(t, tau, alpha, a), second);
    }
    if a >= 1.0 {
        rep.record(
            damped_integral(f64::INFINITY, tau, alpha, a),
            2.0 / (1.0 - alpha) * lt * tau,
        );
    }
    rep.record(
        kernel_integral(1.0, tau, alpha, gamma),
        2f64.powf(gamma) / ((1.0 - gamma) * (1.0 - alpha)) * lt * tau,
    );
    Ok(rep)
}

/// `\int_0^inf e^{-a s} max{lambda, alpha/s}^alpha ds <= lambda^{alpha-1}/(1-alpha) + lambda^alpha / a`.
pub fn verify_exponential_integral(lambda: f64, alpha: f64, a: f64) -> LemmaCheckReport {
    let mut rep = LemmaCheckReport::new("5.2", format!("lambda = {lambda}, alpha = {alpha}, a = {a}"));
    let bound = lambda.powf(alpha - 1.0) / (1.0 - alpha) + lambda.powf(alpha) / a;
    rep.record(exponential_max_integral(lambda, alpha, a), bound);
    rep
}

/// `|j_eps(w_eps) - j_0(w_0)|_alpha <= 3 |w_eps - E w_0|_{X_eps^alpha} + 3 C_P tau |w_0|`
/// on seeded samples of slow vectors.
#[allow(clippy::too_many_arguments)]
pub fn verify_coordinate_comparison(
    eigs_eps: &EigenData,
    eigs_0: &EigenData,
    pair: &ComparisonPair,
    m: usize,
    alpha: f64,
    tau: f64,
    samples: usize,
    seed: u64,
) -> Result<LemmaCheckReport> {
    let mut rep = LemmaCheckReport::new("5.4", format!("{samples} samples, m = {m}"));
    let n = eigs_0.len();
    let split = SpectralSplit::new(eigs_eps, m)?;
    let coords = CoordinateMap::new(&split, pair)?;
    let c_p = contour_constants(eigs_eps, eigs_0, m)?.c_p;
    let lam0 = eigs_0.eigenvalues();
    let lam_e = eigs_eps.eigenvalues();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..samples {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let w0: Vec<f64> = (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut w0_full = vec![0.0; n];
        w0_full[..m].copy_from_slice(&w0);
        let ew0 = pair.apply(crate::spectral::Direction::E, &w0_full);
        // Slow part of E w_0, perturbed by a random slow vector of varying size.
        let noise = match k % 3 {
            0 => 0.0,
            1 => scale * 10f64.powf(rng.random_range(-4.0..0.0)),
            _ => scale * rng.random_range(0.0..2.0),
        };
        let w_eps: Vec<f64> = (0..m)
            .map(|i| ew0[i] + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p_eps = coords.coords_of(&w_eps);
        let diff: Vec<f64> = p_eps.iter().zip(&w0).map(|(a, b)| a - b).collect();
        let lhs = weighted_norm(&diff, lam0, alpha);
        let mut gap = vec![0.0; n];
        for i in 0..n {
            gap[i] = if i < m { w_eps[i] } else { 0.0 } - ew0[i];
        }
        let rhs = 3.0 * weighted_norm(&gap, lam_e, alpha) + 3.0 * c_p * tau * w0.iter().map(|x| x * x).sum::<f64>().sqrt();
        rep.record(lhs, rhs);
    }
    Ok(rep)
}

/// Convergence of the leading `m + 1` eigenvalues along a family: the
/// deviations `max_{i <= m+1} |lambda_i^eps - lambda_i^0|` must not increase as
/// `eps` decreases (`spectra` ordered by decreasing `eps`). The ratio is
/// last deviation over first.
pub fn verify_eigen_convergence(eigs_0: &EigenData, spectra: &[EigenData], m: usize) -> LemmaCheckReport {
    let mut rep = LemmaCheckReport::new("3.2", format!("{} parameters, modes 1..={}", spectra.len(), m + 1));
    let dev: Vec<f64> = spectra
        .iter()
        .map(|e| {
            (0..=m)
                .map(|i| (e.lambda(i) - eigs_0.lambda(i)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    for w in dev.windows(2) {
        rep.record(w[1], w[0]);
    }
    if let (Some(first), Some(last)) = (dev.first(), dev.last()) {
        rep.worst_ratio = if *first == 0.0 { 0.0 } else { last / first };
    }
    rep
}

/// Constants of the slow-trajectory comparison: the growth rate
/// `lambda_m^eps + 4 L_F (lambda_m^eps)^alpha` and
/// `K_2 = (6 (lambda_m^0)^alpha L_F C_P + C_4)(|p0| + C_F)`. Reported only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConstants {
    pub growth_rate: f64,
    pub k_2: f64,
}

pub fn trajectory_constants(
    eigs_eps: &EigenData,
    eigs_0: &EigenData,
    m: usize,
    l_f: f64,
    c_f: f64,
    alpha: f64,
    p0_norm: f64,
) -> Result<TrajectoryConstants> {
    let k = contour_constants(eigs_eps, eigs_0, m)?;
    let lm_e = eigs_eps.lambda(m - 1);
    Ok(TrajectoryConstants {
        growth_rate: lm_e + 4.0 * l_f * lm_e.powf(alpha),
        k_2: (6.0 * eigs_0.lambda(m - 1).powf(alpha) * l_f * k.c_p + k.c_4) * (p0_norm + c_f),
    })
}

fn grid_label(t: &[f64]) -> String {
    match (t.first(), t.last()) {
        (Some(a), Some(b)) => format!("t in [{a:e}, {b:e}] ({} points)", t.len()),
        _ => "empty grid".to_string(),
    }
}

/// `count` logarithmically spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// `count` evenly spaced points in `[lo, hi]`.
pub fn lin_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(n: usize) -> EigenData {
        EigenData::diagonal((1..=n).map(|i| (i * i) as f64).collect()).unwrap()
    }

    fn shifted(e: &EigenData, eps: f64) -> EigenData {
        EigenData::diagonal(e.eigenvalues().iter().map(|l| l + eps).collect()).unwrap()
    }

    fn rotated(e: &EigenData, i: usize, j: usize, angle: f64) -> (EigenData, ComparisonPair) {
        let n = e.len();
        let mut g = DMatrix::<f64>::identity(n, n);
        let (s, c) = angle.sin_cos();
        g[(i, i)] = c;
        g[(j, j)] = c;
        g[(i, j)] = -s;
        g[(j, i)] = s;
        let ee = EigenData::new(e.eigenvalues().to_vec(), g).unwrap();
        let pair = ComparisonPair::new(e, &ee, DMatrix::identity(n, n), 0.5).unwrap();
        (ee, pair)
    }

    #[test]
    fn tau_zero_and_diagonal_closed_form() {
        let e0 = quadratic(16);
        assert_eq!(tau_of(&e0, &e0, &ComparisonPair::identity(16), 0.5), 0.0);
        for eps in [1e-1, 1e-2, 1e-3] {
            let ee = shifted(&e0, eps);
            let svd = tau_of(&ee, &e0, &ComparisonPair::identity(16), 0.5);
            // Independent arithmetic: per mode (lambda+eps)^alpha eps / (lambda (lambda+eps)).
            let oracle = (1..=16)
                .map(|i| {
                    let l = (i * i) as f64;
                    (l + eps).sqrt() * eps / (l * (l + eps))
                })
                .fold(0.0, f64::max);
            assert!((svd - oracle).abs() < 1e-10 * oracle.max(1e-300));
            assert!((tau_diagonal(&ee, &e0, 0.5) - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn tau_rotation_vanishes_linearly() {
        let e0 = quadratic(12);
        let mut ratios = Vec::new();
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let (ee, pair) = rotated(&e0, 1, 2, eps);
            ratios.push(tau_of(&ee, &e0, &pair, 0.5) / eps);
        }
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(lo > 0.0 && hi / lo < 1.1, "{ratios:?}");
    }

    #[test]
    fn l_kernel_branches() {
        assert_eq!(l_eps_alpha(1.0, 0.01, 0.5), 0.01);
        assert!((l_eps_alpha(1e-6, 0.01, 0.5) - 1000.0).abs() < 1e-9);
        let cross = 0.01f64.powf(1.0 / 0.5);
        assert!(((0.01 / cross) - cross.powf(-0.5)).abs() < 1e-9);
    }

    #[test]
    fn rate_bound_cases() {
        assert_eq!(rate_bound(0.0, 0.3), 0.3);
        assert_eq!(rate_bound(0.5, 0.0), 0.5);
        assert!((rate_bound(1e-3, 0.0) - 1e-3 * 1e3f64.ln()).abs() < 1e-18);
    }

    #[test]
    fn c3_examples() {
        let e = quadratic(6);
        assert_eq!(c3_of(Complex64::new(0.0, 0.0), &e, &e).unwrap(), 1.0);
        let l = Complex64::new(-2.5, 0.0);
        // dist to {-1, -4, ...} is 1.5 for both spectra.
        let expected = (1.0 + 2.5 / 1.5) * (1.0 + 2.5 / 1.5);
        assert!((c3_of(l, &e, &e).unwrap() - expected).abs() < 1e-14);
        assert!(matches!(
            c3_of(Complex64::new(-4.0, 0.0), &e, &e),
            Err(Error::Pole { .. })
        ));
        for k in 0..200 {
            let r = 0.01 * (1.1f64).powi(k);
            for sign in [1.0, -1.0] {
                let z = Complex64::from_polar(r, sign * 3.0 * PI / 4.0);
                assert!(c3_of(z, &e, &shifted(&e, 0.3)).unwrap() <= 6.0);
            }
        }
    }

    #[test]
    fn gap_check_examples() {
        let e = quadratic(20);
        let zero = gap_check(&e, &e, 0.0, 0.5);
        // Separation >= 3 excludes only m = 1 (gap 3 is allowed).
        assert_eq!(zero.chosen, Some(1));
        assert_eq!(zero.admissible.len(), 19);

        let r = gap_check(&e, &e, 0.05, 0.5);
        // Brute-force scan of the four conditions.
        let oracle = (1..20usize)
            .find(|&m| {
                let (a, b) = ((m * m) as f64, ((m + 1) * (m + 1)) as f64);
                let lf = 0.05;
                b - a >= 12.0 * lf * (a.sqrt() + b.sqrt())
                    && a.sqrt() >= 24.0 * lf / 0.5
                    && a.sqrt() >= 12.0 * lf / 0.5
                    && b - a >= 6.0 * lf * (a.sqrt() + b.sqrt())
                    && b - a >= 3.0
            })
            .unwrap();
        assert_eq!(r.chosen, Some(oracle));
        assert_eq!(oracle, 3);

        let linear = EigenData::diagonal((1..=20).map(|i| i as f64).collect()).unwrap();
        let empty = gap_check(&linear, &linear, 1.0, 0.5);
        assert!(empty.admissible.is_empty() && empty.chosen.is_none());
    }

    #[test]
    fn gap_check_stable_under_extra_modes() {
        let small = quadratic(10);
        let large = quadratic(30);
        let a = gap_check(&small, &small, 0.02, 0.5);
        let b = gap_check(&large, &large, 0.02, 0.5);
        assert_eq!(a.chosen, b.chosen);
        for g in &a.margins {
            assert_eq!(Some(g), b.margins_at(g.m));
        }
    }

    #[test]
    fn resolvent_identity_on_rotation() {
        let e0 = quadratic(10);
        let (ee, pair) = rotated(&e0, 2, 3, 0.05);
        let pts = [
            Complex64::new(0.0, 0.0),
            Complex64::new(-2.5, 0.7),
            Complex64::new(3.0, -4.0),
            Complex64::new(-30.0, 0.1),
        ];
        let rep = verify_resolvent_identity(&ee, &e0, &pair, 0.5, &pts).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.worst_ratio <= 1.0);
    }

    #[test]
    fn projection_distance_zero_for_shift() {
        let e0 = quadratic(12);
        let ee = shifted(&e0, 0.01);
        let tau = tau_diagonal(&ee, &e0, 0.5);
        let rep = verify_projection_distance(&ee, &e0, &ComparisonPair::identity(12), 2, 0.5, tau).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.worst_ratio, 0.0);
    }

    #[test]
    fn semigroup_checks_on_shift_family() {
        let e0 = quadratic(16);
        for eps in [1e-1, 1e-2, 1e-3] {
            let ee = shifted(&e0, eps);
            let pair = ComparisonPair::identity(16);
            let tau = tau_of(&ee, &e0, &pair, 0.5);
            let full = verify_semigroup_distance(&ee, &e0, &pair, 1, 0.5, tau, &log_grid(1e-3, 10.0, 40), Part::Full).unwrap();
            assert!(full.passed(), "{full:?}");
            let p = verify_semigroup_distance(&ee, &e0, &pair, 1, 0.5, tau, &lin_grid(-3.0, 0.0, 31), Part::P).unwrap();
            assert!(p.passed(), "{p:?}");
            let q = verify_semigroup_distance(&ee, &e0, &pair, 1, 0.5, tau, &log_grid(1e-3, 10.0, 40), Part::Q).unwrap();
            assert!(q.passed(), "{q:?}");
        }
    }

    #[test]
    fn integral_quadratures_against_closed_forms() {
        // tau = 0 style check: with l = s^{-alpha} throughout (tau huge relative),
        // \int_0^t (t-s)^{-gamma} s^{-alpha} ds = t^{1-alpha-gamma} B(1-gamma, 1-alpha).
        let (alpha, gamma, t) = (0.5, 0.5, 1e-6);
        let v = kernel_integral(t, 0.9, alpha, gamma);
        assert!((v - PI).abs() < 1e-8, "{v}");
        // \int_0^inf e^{-s} min{tau/s, s^{-1/2}} ds, split at s* = tau^2, against an
        // independent trapezoid evaluation on a graded mesh.
        let tau: f64 = 1e-2;
        let exact_head = 2.0 * tau; // \int_0^{tau^2} s^{-1/2} ds (e^{-s} ~ 1 to 1e-4 relative)
        let v = damped_integral(tau * tau, tau, 0.5, 1.0);
        assert!((v - exact_head).abs() < 1e-4 * exact_head);
        // Lemma 5.2 example integrand with lambda = 1, alpha = 1/2, a = 1.
        let q = exponential_max_integral(1.0, 0.5, 1.0);
        let direct = integrate(|x: f64| {
            let s = x * x;
            (-s).exp() * 1f64.max(0.5 / s).sqrt() * 2.0 * x
        }, 0.0, 1.0, 1e-12)
        .value
            + integrate_to_infinity(|s: f64| (-s).exp() * 1f64.max(0.5 / s).sqrt(), 1.0, 1e-12).value;
        assert!((q - direct).abs() < 1e-8);
        assert!(verify_exponential_integral(1.0, 0.5, 1.0).passed());
    }

    #[test]
    fn integral_bounds_hold_for_small_tau() {
        for tau in [1e-2, 1e-4, 1e-6] {
            let rep = verify_integral_bounds(tau, 0.5, 0.5, 1.0, &log_grid(1e-3, 10.0, 9)).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
        assert!(verify_integral_bounds(1.5, 0.5, 0.5, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn coordinate_comparison_on_rotation() {
        let e0 = quadratic(10);
        let (ee, pair) = rotated(&e0, 1, 2, 1e-2);
        let tau = tau_of(&ee, &e0, &pair, 0.5);
        let rep = verify_coordinate_comparison(&ee, &e0, &pair, 2, 0.5, tau, 1000, 5).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn eigen_convergence_report() {
        let e0 = quadratic(8);
        let spectra: Vec<EigenData> = [1e-1, 1e-2, 1e-3].iter().map(|&e| shifted(&e0, e)).collect();
        let rep = verify_eigen_convergence(&e0, &spectra, 2);
        assert!(rep.passed());
        assert!((rep.worst_ratio - 1e-2).abs() < 1e-9);
    }

    #[test]
    fn sector_and_rectangle_constants() {
        let e0 = quadratic(12);
        let k = contour_constants(&e0, &e0, 1).unwrap();
        // Rectangle for m = 1: Re in [-2, 0], |Im| <= 1, length 8.
        assert!((k.gamma_length - 8.0).abs() < 1e-15);
        // At the corner -2 + i: |l| = sqrt 5, dist to -1 is sqrt 2, both spectra equal.
        let corner = (1.0 + 5f64.sqrt() / 2f64.sqrt()).powi(2);
        assert!(k.sup_c3_rectangle >= corner);
        assert!(k.c_5 >= 4.0);
    }

    proptest! {
        #[test]
        fn c3_at_least_one(re in -50.0f64..50.0, im in 0.01f64..20.0) {
            let e = quadratic(6);
            let v = c3_of(Complex64::new(re, im), &e, &shifted(&e, 0.2)).unwrap();
            prop_assert!(v >= 1.0);
        }

        #[test]
        fn coordinate_comparison_is_homogeneous(scale in 0.1f64..10.0) {
            // Both sides of the coordinate estimate scale linearly.
            let e0 = quadratic(8);
            let (ee, pair) = rotated(&e0, 1, 2, 1e-2);
            let split = SpectralSplit::new(&ee, 2).unwrap();
            let coords = CoordinateMap::new(&split, &pair).unwrap();
            let w0 = [0.3, -0.7];
            let we = [0.31, -0.69];
            let lhs = |s: f64| {
                let p: Vec<f64> = coords.coords_of(&[we[0] * s, we[1] * s]);
                weighted_norm(&[p[0] - w0[0] * s, p[1] - w0[1] * s], e0.eigenvalues(), 0.5)
            };
            prop_assert!((lhs(scale) - scale * lhs(1.0)).abs() <= 1e-12 * scale);
        }
    }
}
