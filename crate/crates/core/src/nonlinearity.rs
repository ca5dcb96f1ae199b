//! Bounded, globally Lipschitz nonlinearities with compact support in the
//! fractional-power space, together with certified constants.
//!
//! Every [`NonlinearitySpec`] is a raw map `G` multiplied by a radial cutoff,
//! `F(u) = theta(|u|_cut / R) G(u)`, so its support is bounded by
//! construction. The cutoff norm uses a fixed set of weights, which lets a
//! nonlinearity be reused unchanged on a perturbed operator; the certificates
//! (`C_F`, `L_F`, support radius) are always stated for the metric of the
//! space it acts on.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::{ComparisonPair, EigenData};

/// Relative slack applied to certificates computed from floating-point norms.
const CERT_SLACK: f64 = 1e-10;
/// Sampled values may exceed certificates by at most this much.
const VIOLATION_TOL: f64 = 1e-9;

/// Smooth radial cutoff: 1 on `[0, inner]`, 0 on `[1, inf)`, cubic smoothstep
/// in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub inner: f64,
}

impl Default for CutoffProfile {
    fn default() -> Self {
        Self { inner: 0.5 }
    }
}

impl CutoffProfile {
    pub fn theta(&self, s: f64) -> f64 {
        if s <= self.inner {
            1.0
        } else if s >= 1.0 {
            0.0
        } else {
            let w = (1.0 - s) / (1.0 - self.inner);
            w * w * (3.0 - 2.0 * w)
        }
    }

    /// Lipschitz constant of `theta`: max of `6w(1-w)/(1-inner)` is `1.5/(1-inner)`.
    pub fn lipschitz(&self) -> f64 {
        1.5 / (1.0 - self.inner)
    }
}

/// User-supplied raw map.
pub type RawFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The raw (unprepared) map `G`.
#[derive(Clone)]
pub enum RawMap {
    Zero,
    /// Constant vector.
    Constant(Vec<f64>),
    /// `G_i(u) = beta(|Pu|_cut / r_slow) c_i tanh(sum_{j<m} w_ij u_j)`: reads
    /// only the first `m` coefficients.
    Decoupled {
        m: usize,
        c: Vec<f64>,
        w: DMatrix<f64>,
        slow_radius: f64,
    },
    /// `G_i(u) = c_i tanh(sum_j w_ij u_j)` with `c_i = amp decay^i` and
    /// `w_ij = weight decay^max(i, j)` (zero-based).
    Tanh { amp: f64, decay: f64, weight: f64 },
    Custom(RawFn),
}

impl fmt::Debug for RawMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawMap::Zero => write!(f, "Zero"),
            RawMap::Constant(q) => f.debug_tuple("Constant").field(q).finish(),
            RawMap::Decoupled { m, slow_radius, .. } => f
                .debug_struct("Decoupled")
                .field("m", m)
                .field("slow_radius", slow_radius)
                .finish_non_exhaustive(),
            RawMap::Tanh { amp, decay, weight } => f
                .debug_struct("Tanh")
                .field("amp", amp)
                .field("decay", decay)
                .field("weight", weight)
                .finish(),
            RawMap::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Certified sup bound and Lipschitz constant of a raw map, the latter with
/// respect to the cutoff metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawConstants {
    pub c_g: f64,
    pub l_g: f64,
}

/// A prepared nonlinearity with its certificates.
#[derive(Clone)]
pub struct NonlinearitySpec {
    raw: RawMap,
    /// Additive constant forcing inside the cutoff.
    shift: Option<Vec<f64>>,
    profile: CutoffProfile,
    cutoff_radius: f64,
    cutoff_sq_weights: Arc<Vec<f64>>,
    frame: Option<Arc<Frame>>,
    alpha: f64,
    c_f: f64,
    l_f: f64,
    support_radius: f64,
}

/// Change of frame `v -> E G(M v)` for a nonlinearity moved to another space.
#[derive(Debug)]
struct Frame {
    e: DMatrix<f64>,
    m: DMatrix<f64>,
}

impl fmt::Debug for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearitySpec")
            .field("raw", &self.raw)
            .field("shifted", &self.shift.is_some())
            .field("framed", &self.frame.is_some())
            .field("alpha", &self.alpha)
            .field("c_f", &self.c_f)
            .field("l_f", &self.l_f)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

/// `F(u) = theta(|u|_cut / R) G(u)` with `C_F = C_G` and
/// `L_F = L_G + C_G L_theta / R`. The cutoff metric is given by `weights`
/// (`lambda_i^alpha`), which is also the metric of the certificates.
pub fn prepare_cutoff(
    g: RawMap,
    constants: RawConstants,
    profile: CutoffProfile,
    radius: f64,
    alpha: f64,
    weights: &[f64],
) -> Result<NonlinearitySpec> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("cutoff radius {radius} must be positive")));
    }
    if !constants.c_g.is_finite() || !constants.l_g.is_finite() {
        return Err(Error::invalid("raw constants must be finite"));
    }
    if !(0.0..1.0).contains(&profile.inner) {
        return Err(Error::invalid("cutoff inner fraction must lie in [0, 1)"));
    }
    Ok(NonlinearitySpec {
        raw: g,
        shift: None,
        profile,
        cutoff_radius: radius,
        cutoff_sq_weights: Arc::new(weights.iter().map(|w| w * w).collect()),
        frame: None,
        alpha,
        c_f: constants.c_g,
        l_f: constants.l_g + constants.c_g * profile.lipschitz() / radius,
        support_radius: radius,
    })
}

/// Parameters of the coupled tanh family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TanhParams {
    #[serde(rename = "C")]
    pub amp: f64,
    pub decay: f64,
    pub weight: f64,
    #[serde(rename = "R")]
    pub radius: f64,
}

/// Parameters of the decoupled (slow-input) family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupledParams {
    #[serde(rename = "C")]
    pub amp: f64,
    pub decay: f64,
    pub weight: f64,
    #[serde(rename = "R")]
    pub radius: f64,
}

impl NonlinearitySpec {
    pub fn zero(eigs: &EigenData, alpha: f64) -> Self {
        prepare_cutoff(
            RawMap::Zero,
            RawConstants { c_g: 0.0, l_g: 0.0 },
            CutoffProfile::default(),
            1.0,
            alpha,
            &eigs.weights(alpha),
        )
        .expect("zero nonlinearity is always valid")
    }

    /// Constant forcing `q` (supported on modes above `m`) inside a ball of radius `radius`.
    pub fn constant(eigs: &EigenData, alpha: f64, q: Vec<f64>, radius: f64) -> Result<Self> {
        if q.len() != eigs.len() {
            return Err(Error::invalid("forcing vector has the wrong length"));
        }
        let c_g = norm2(&q);
        prepare_cutoff(
            RawMap::Constant(q),
            RawConstants { c_g, l_g: 0.0 },
            CutoffProfile::default(),
            radius,
            alpha,
            &eigs.weights(alpha),
        )
    }

    /// Coupled family `F_i = theta c_i tanh(sum_j w_ij u_j)`.
    pub fn tanh(eigs: &EigenData, alpha: f64, p: TanhParams) -> Result<Self> {
        check_family(p.amp, p.decay, p.weight, p.radius)?;
        let n = eigs.len();
        let weights = eigs.weights(alpha);
        let c: Vec<f64> = (0..n).map(|i| p.amp * p.decay.powi(i as i32)).collect();
        let jac = DMatrix::from_fn(n, n, |i, j| {
            c[i] * p.weight * p.decay.powi(i.max(j) as i32) / weights[j]
        });
        let constants = RawConstants {
            c_g: norm2(&c),
            l_g: linalg::op_norm(&jac) * (1.0 + CERT_SLACK),
        };
        prepare_cutoff(
            RawMap::Tanh {
                amp: p.amp,
                decay: p.decay,
                weight: p.weight,
            },
            constants,
            CutoffProfile::default(),
            p.radius,
            alpha,
            &weights,
        )
    }

    /// Family reading only the slow coefficients: the raw map is
    /// `beta(|Pu|_alpha / (R/4)) c_i tanh(sum_{j<m} w_ij u_j)` with the tanh
    /// family's coefficients. Requires the a-priori graph bound
    /// `(sum_{i>m} c_i^2 lambda_i^{2 alpha - 2})^{1/2} <= (sqrt 3 / 4) R`, which keeps every
    /// `p + Phi(p)` with `|p|_alpha < R/4` inside the plateau `|u|_alpha <= R/2`; the
    /// prepared map then never depends on the Q coordinates along trajectories.
    pub fn decoupled(eigs: &EigenData, alpha: f64, m: usize, p: DecoupledParams) -> Result<Self> {
        check_family(p.amp, p.decay, p.weight, p.radius)?;
        let n = eigs.len();
        if m == 0 || m >= n {
            return Err(Error::invalid(format!("decoupled family needs 1 <= m < N, got {m}")));
        }
        let weights = eigs.weights(alpha);
        let c: Vec<f64> = (0..n).map(|i| p.amp * p.decay.powi(i as i32)).collect();
        let graph_bound = (m..n)
            .map(|i| (c[i] * weights[i] / eigs.lambda(i)).powi(2))
            .sum::<f64>()
            .sqrt();
        if graph_bound > 3f64.sqrt() / 4.0 * p.radius {
            return Err(Error::invalid(format!(
                "decoupled family: graph bound {graph_bound:.4e} exceeds sqrt(3)/4 R; increase R"
            )));
        }
        let w = DMatrix::from_fn(n, m, |i, j| p.weight * p.decay.powi(i.max(j) as i32));
        let jac = DMatrix::from_fn(n, m, |i, j| c[i] * w[(i, j)] / weights[j]);
        let slow_radius = p.radius / 4.0;
        let profile = CutoffProfile::default();
        let c_g = norm2(&c);
        let l_g = (linalg::op_norm(&jac) + c_g * profile.lipschitz() / slow_radius) * (1.0 + CERT_SLACK);
        prepare_cutoff(
            RawMap::Decoupled {
                m,
                c,
                w,
                slow_radius,
            },
            RawConstants { c_g, l_g },
            profile,
            p.radius,
            alpha,
            &weights,
        )
    }

    /// `theta (G + eps q)`: adds constant forcing inside the existing cutoff.
    pub fn with_forcing(&self, q: &[f64], eps: f64) -> Result<Self> {
        if self.frame.is_some() {
            return Err(Error::invalid("forcing shift must be applied before a change of frame"));
        }
        if q.len() != self.cutoff_sq_weights.len() {
            return Err(Error::invalid("forcing vector has the wrong length"));
        }
        let mut out = self.clone();
        let mut shift = self.shift.clone().unwrap_or_else(|| vec![0.0; q.len()]);
        for (s, qi) in shift.iter_mut().zip(q) {
            *s += eps * qi;
        }
        let extra = eps.abs() * norm2(q);
        out.shift = Some(shift);
        out.c_f += extra;
        out.l_f += extra * self.profile.lipschitz() / self.cutoff_radius;
        Ok(out)
    }

    /// The same map moved to the space of `eigs_eps`: `F_eps(v) = E F(M v)`
    /// in eigen-coordinates, recertified for the `alpha`-metric of `eigs_eps`.
    /// With `E = I` this only changes the certificates.
    pub fn transported(
        &self,
        eigs_from: &EigenData,
        eigs_to: &EigenData,
        pair: &ComparisonPair,
    ) -> Result<Self> {
        if self.frame.is_some() {
            return Err(Error::invalid("nonlinearity is already transported"));
        }
        let n = eigs_to.len();
        if eigs_from.len() != n || self.cutoff_sq_weights.len() != n {
            return Err(Error::invalid("transport dimensions disagree"));
        }
        let cut: Vec<f64> = self.cutoff_sq_weights.iter().map(|w| w.sqrt()).collect();
        let to = eigs_to.weights(self.alpha);
        let slack = 1.0 + CERT_SLACK;
        let e_base = if pair.is_identity() { 1.0 } else { linalg::op_norm(pair.e()) * slack };
        // |M v|_cut <= m_alpha |v|_to and |E x|_to <= e_alpha |x|_cut.
        let m_alpha = linalg::mixed_norm(&cut, pair.m(), &to) * slack;
        let e_alpha = linalg::mixed_norm(&to, pair.e(), &cut) * slack;
        let mut out = self.clone();
        out.c_f = self.c_f * e_base;
        out.l_f = self.l_f * e_base * m_alpha;
        out.support_radius = self.cutoff_radius * e_alpha;
        if !pair.is_identity() {
            out.frame = Some(Arc::new(Frame {
                e: pair.e().clone(),
                m: pair.m().clone(),
            }));
        }
        Ok(out)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_f(&self) -> f64 {
        self.c_f
    }

    pub fn l_f(&self) -> f64 {
        self.l_f
    }

    /// `F` vanishes outside the `alpha`-ball of this radius.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn cutoff_radius(&self) -> f64 {
        self.cutoff_radius
    }

    pub fn profile(&self) -> CutoffProfile {
        self.profile
    }

    pub fn raw(&self) -> &RawMap {
        &self.raw
    }

    pub fn dim(&self) -> usize {
        self.cutoff_sq_weights.len()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.raw, RawMap::Zero) && self.shift.is_none()
    }

    fn cutoff_norm(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.cutoff_sq_weights.iter())
            .map(|(x, w)| x * x * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Evaluates `F(u)` on eigen-coefficients of the owning space.
    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(u.len(), n);
        match &self.frame {
            None => self.eval_local(u),
            Some(frame) => {
                let v = mat_vec(&frame.m, u);
                mat_vec(&frame.e, &self.eval_local(&v))
            }
        }
    }

    fn eval_local(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        if self.is_zero() {
            return vec![0.0; n];
        }
        let s = self.cutoff_norm(u) / self.cutoff_radius;
        let theta = self.profile.theta(s);
        if theta == 0.0 {
            return vec![0.0; n];
        }
        let mut g = self.eval_raw(u);
        if let Some(shift) = &self.shift {
            for (gi, si) in g.iter_mut().zip(shift) {
                *gi += si;
            }
        }
        if theta != 1.0 {
            for gi in &mut g {
                *gi *= theta;
            }
        }
        g
    }

    fn eval_raw(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        match &self.raw {
            RawMap::Zero => vec![0.0; n],
            RawMap::Constant(q) => q.clone(),
            RawMap::Custom(f) => f(u),
            RawMap::Tanh { amp, decay, weight } => tanh_eval(u, *amp, *decay, *weight),
            RawMap::Decoupled {
                m,
                c,
                w,
                slow_radius,
            } => {
                let slow = self.cutoff_norm(&u[..*m]) / slow_radius;
                let beta = self.profile.theta(slow);
                if beta == 0.0 {
                    return vec![0.0; n];
                }
                (0..n)
                    .map(|i| {
                        let arg: f64 = (0..*m).map(|j| w[(i, j)] * u[j]).sum();
                        beta * c[i] * arg.tanh()
                    })
                    .collect()
            }
        }
    }
}

fn check_family(amp: f64, decay: f64, weight: f64, radius: f64) -> Result<()> {
    if !(amp >= 0.0 && amp.is_finite()) {
        return Err(Error::invalid(format!("amplitude C = {amp} must be finite and >= 0")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("decay = {decay} must lie in (0, 1]")));
    }
    if !weight.is_finite() {
        return Err(Error::invalid("weight must be finite"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("R = {radius} must be positive")));
    }
    Ok(())
}

/// `c_i tanh(s_i)` with `s_i = weight (decay^i sum_{j<=i} u_j + sum_{j>i} decay^j u_j)`,
/// evaluated in linear time.
fn tanh_eval(u: &[f64], amp: f64, decay: f64, weight: f64) -> Vec<f64> {
    let n = u.len();
    let mut suffix = vec![0.0; n + 1];
    let mut pow = decay.powi(n as i32 - 1);
    for j in (0..n).rev() {
        suffix[j] = suffix[j + 1] + pow * u[j];
        if decay > 0.0 {
            pow /= decay;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut prefix = 0.0;
    let mut di = 1.0;
    for i in 0..n {
        prefix += u[i];
        let s = weight * (di * prefix + suffix[i + 1]);
        out.push(amp * di * s.tanh());
        di *= decay;
    }
    out
}

fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * v[j]).sum())
        .collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform sample from the `alpha`-ball `{|u|_alpha <= radius}` with weights `w_i`.
pub fn sample_ball<R: Rng>(rng: &mut R, weights: &[f64], radius: f64) -> Vec<f64> {
    let n = weights.len();
    let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = norm2(&y).max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    y.iter().zip(weights).map(|(yi, wi)| yi / norm * r / wi).collect()
}

fn weighted(v: &[f64], weights: &[f64]) -> f64 {
    v.iter().zip(weights).map(|(x, w)| (x * w).powi(2)).sum::<f64>().sqrt()
}

/// Empirical lower bounds for `C_F` and `L_F` next to their certificates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimate {
    pub c_empirical: f64,
    pub l_empirical: f64,
    pub c_certified: f64,
    pub l_certified: f64,
}

/// Samples on `alpha`-balls of radii `{R/4, R/2, R, 2R}` (R the support radius).
pub fn estimate_constants(
    f: &NonlinearitySpec,
    eigs: &EigenData,
    sample_count: usize,
    seed: u64,
) -> Result<ConstantEstimate> {
    let r = f.support_radius();
    estimate_constants_on(f, eigs, &[r / 4.0, r / 2.0, r, 2.0 * r], sample_count, seed)
}

/// As [`estimate_constants`] on explicit ball radii. Each sample is paired with
/// a nearby perturbation (relative size `10^-1 .. 10^-4`) and with the
/// previous sample for the difference quotients.
pub fn estimate_constants_on(
    f: &NonlinearitySpec,
    eigs: &EigenData,
    radii: &[f64],
    sample_count: usize,
    seed: u64,
) -> Result<ConstantEstimate> {
    if sample_count < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    if radii.is_empty() {
        return Err(Error::invalid("need at least one sampling radius"));
    }
    let weights = eigs.weights(f.alpha());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_emp = 0.0_f64;
    let mut l_emp = 0.0_f64;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for k in 0..sample_count {
        let radius = radii[k % radii.len()];
        let u = sample_ball(&mut rng, &weights, radius);
        let fu = f.eval(&u);
        c_emp = c_emp.max(norm2(&fu));

        let scale = radius * 10f64.powf(-rng.random_range(1.0..4.0));
        let delta = sample_ball(&mut rng, &weights, scale);
        let v: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let fv = f.eval(&v);
        l_emp = l_emp.max(quotient(&fu, &fv, &delta, &weights));

        if let Some((pu, pfu)) = &prev {
            let d: Vec<f64> = u.iter().zip(pu).map(|(a, b)| a - b).collect();
            l_emp = l_emp.max(quotient(&fu, pfu, &d, &weights));
        }
        prev = Some((u, fu));
    }
    let est = ConstantEstimate {
        c_empirical: c_emp,
        l_empirical: l_emp,
        c_certified: f.c_f(),
        l_certified: f.l_f(),
    };
    if exceeds(c_emp, f.c_f()) {
        return Err(Error::CertificateViolation {
            constant: "C_F",
            empirical: c_emp,
            certified: f.c_f(),
        });
    }
    if exceeds(l_emp, f.l_f()) {
        return Err(Error::CertificateViolation {
            constant: "L_F",
            empirical: l_emp,
            certified: f.l_f(),
        });
    }
    Ok(est)
}

fn exceeds(empirical: f64, certified: f64) -> bool {
    empirical > certified + VIOLATION_TOL * certified.max(1.0)
}

fn quotient(fu: &[f64], fv: &[f64], delta: &[f64], weights: &[f64]) -> f64 {
    let den = weighted(delta, weights);
    if den == 0.0 {
        return 0.0;
    }
    let num = fu.iter().zip(fv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    num / den
}

/// Empirical `sup_{u_0} |F_eps(E u_0) - E F_0(u_0)|` over samples of `u_0`
/// on `alpha`-balls (metric of `eigs0`) of radii `{R/4, R/2, R, 2R}`,
/// `R` the support radius of `F_0`.
pub fn rho_distance(
    f_eps: &NonlinearitySpec,
    f_0: &NonlinearitySpec,
    eigs0: &EigenData,
    pair: &ComparisonPair,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    if (f_eps.alpha() - f_0.alpha()).abs() > 0.0 {
        return Err(Error::invalid("nonlinearities certified for different alpha"));
    }
    let weights = eigs0.weights(f_0.alpha());
    let r = f_0.support_radius();
    let radii = [r / 4.0, r / 2.0, r, 2.0 * r];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup = 0.0_f64;
    for k in 0..sample_count.max(1) {
        let u0 = sample_ball(&mut rng, &weights, radii[k % radii.len()]);
        let eu = pair.apply(crate::spectral::Direction::E, &u0);
        let lhs = f_eps.eval(&eu);
        let rhs = pair.apply(crate::spectral::Direction::E, &f_0.eval(&u0));
        let d = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        sup = sup.max(d);
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(n: usize) -> EigenData {
        EigenData::diagonal((1..=n).map(|i| (i * i) as f64).collect()).unwrap()
    }

    fn tanh_family(eigs: &EigenData) -> NonlinearitySpec {
        NonlinearitySpec::tanh(
            eigs,
            0.5,
            TanhParams {
                amp: 0.3,
                decay: 0.7,
                weight: 0.8,
                radius: 2.0,
            },
        )
        .unwrap()
    }

    fn dense_tanh(u: &[f64], amp: f64, decay: f64, weight: f64) -> Vec<f64> {
        let n = u.len();
        (0..n)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| weight * decay.powi(i.max(j) as i32) * u[j])
                    .sum();
                amp * decay.powi(i as i32) * s.tanh()
            })
            .collect()
    }

    #[test]
    fn cubic_profile() {
        let p = CutoffProfile::default();
        assert_eq!(p.theta(0.2), 1.0);
        assert_eq!(p.theta(0.5), 1.0);
        assert_eq!(p.theta(1.0), 0.0);
        assert!((p.theta(0.75) - 0.5).abs() < 1e-15);
        assert_eq!(p.lipschitz(), 3.0);
        // Derivative at the midpoint is the maximal slope.
        let h = 1e-7;
        let slope = (p.theta(0.75 - h) - p.theta(0.75 + h)) / (2.0 * h);
        assert!((slope - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_family_certificate_example() {
        let eigs = quadratic(4);
        let f = NonlinearitySpec::constant(&eigs, 0.5, vec![0.0, 0.6, 0.8, 0.0], 10.0).unwrap();
        assert!((f.l_f() - 0.3).abs() < 1e-15);
        assert_eq!(f.c_f(), 1.0);
        let est = estimate_constants(&f, &eigs, 4000, 7).unwrap();
        assert!(est.l_empirical <= 0.3 && est.l_empirical > 0.1);
        let inside = estimate_constants_on(&f, &eigs, &[2.5], 500, 7).unwrap();
        assert!((inside.c_empirical - 1.0).abs() < 1e-15);
        assert_eq!(inside.l_empirical, 0.0);
    }

    #[test]
    fn zero_family() {
        let eigs = quadratic(5);
        let f = NonlinearitySpec::zero(&eigs, 0.5);
        assert_eq!(f.eval(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![0.0; 5]);
        let est = estimate_constants(&f, &eigs, 100, 1).unwrap();
        assert_eq!((est.c_empirical, est.l_empirical), (0.0, 0.0));
    }

    #[test]
    fn tanh_fast_path_matches_dense() {
        let u: Vec<f64> = (0..12).map(|i| ((i * 5) as f64).sin() * 0.3).collect();
        let fast = tanh_eval(&u, 0.4, 0.6, 1.3);
        let dense = dense_tanh(&u, 0.4, 0.6, 1.3);
        for (a, b) in fast.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_certificates_hold() {
        let eigs = quadratic(16);
        let f = tanh_family(&eigs);
        let est = estimate_constants(&f, &eigs, 20_000, 11).unwrap();
        assert!(est.c_empirical <= est.c_certified);
        assert!(est.l_empirical <= est.l_certified);
        assert!(est.l_empirical > 0.0);
    }

    #[test]
    fn decoupled_reads_only_slow_modes_and_rejects_small_radius() {
        let eigs = quadratic(8);
        let p = DecoupledParams {
            amp: 0.2,
            decay: 0.5,
            weight: 1.0,
            radius: 4.0,
        };
        let f = NonlinearitySpec::decoupled(&eigs, 0.5, 1, p).unwrap();
        let a = f.eval(&[0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = f.eval(&[0.3, 0.5, -0.2, 0.1, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a, b);
        assert!(a.iter().any(|x| *x != 0.0));
        let tight = DecoupledParams { radius: 0.01, ..p };
        assert!(NonlinearitySpec::decoupled(&eigs, 0.5, 1, tight).is_err());
        estimate_constants(&f, &eigs, 5000, 3).unwrap();
    }

    #[test]
    fn wrong_certificate_is_detected() {
        let eigs = quadratic(4);
        let f = prepare_cutoff(
            RawMap::Custom(Arc::new(|u: &[f64]| u.iter().map(|x| 2.0 * x).collect())),
            RawConstants { c_g: 0.1, l_g: 0.1 },
            CutoffProfile::default(),
            1.0,
            0.5,
            &eigs.weights(0.5),
        )
        .unwrap();
        assert!(matches!(
            estimate_constants(&f, &eigs, 200, 5),
            Err(Error::CertificateViolation { .. })
        ));
    }

    #[test]
    fn forcing_shift_rho() {
        let eigs = quadratic(6);
        let f0 = tanh_family(&eigs);
        let q = vec![0.0, 0.0, 0.6, 0.8, 0.0, 0.0];
        let eps = 1e-2;
        let fe = f0.with_forcing(&q, eps).unwrap();
        let pair = ComparisonPair::identity(6);
        let rho = rho_distance(&fe, &f0, &eigs, &pair, 400, 9).unwrap();
        assert!((rho - eps).abs() < 1e-15, "rho = {rho}");
        assert_eq!(rho_distance(&f0, &f0, &eigs, &pair, 100, 9).unwrap(), 0.0);
        estimate_constants(&fe, &eigs, 5000, 2).unwrap();
    }

    #[test]
    fn transport_to_shifted_spectrum_keeps_map() {
        let e0 = quadratic(6);
        let ee = EigenData::diagonal(e0.eigenvalues().iter().map(|l| l + 0.1).collect()).unwrap();
        let f0 = tanh_family(&e0);
        let fe = f0.transported(&e0, &ee, &ComparisonPair::identity(6)).unwrap();
        let u = [0.1, -0.2, 0.05, 0.0, 0.01, 0.0];
        assert_eq!(fe.eval(&u), f0.eval(&u));
        assert!(fe.support_radius() >= f0.support_radius());
        estimate_constants(&fe, &ee, 5000, 4).unwrap();
        assert_eq!(rho_distance(&fe, &f0, &e0, &ComparisonPair::identity(6), 200, 1).unwrap(), 0.0);
    }

    #[test]
    fn transport_through_rotation() {
        let e0 = quadratic(6);
        let mut rot = DMatrix::<f64>::identity(6, 6);
        let (s, c) = 0.05f64.sin_cos();
        rot[(2, 2)] = c;
        rot[(3, 3)] = c;
        rot[(2, 3)] = -s;
        rot[(3, 2)] = s;
        let ee = EigenData::new(e0.eigenvalues().to_vec(), rot).unwrap();
        let pair = ComparisonPair::new(&e0, &ee, DMatrix::identity(6, 6), 0.5).unwrap();
        let f0 = tanh_family(&e0);
        let fe = f0.transported(&e0, &ee, &pair).unwrap();
        let rho = rho_distance(&fe, &f0, &e0, &pair, 400, 3).unwrap();
        assert!(rho < 1e-15);
        estimate_constants(&fe, &ee, 5000, 8).unwrap();
    }

    proptest! {
        #[test]
        fn vanishes_outside_support(seed in 0u64..1000, scale in 1.0f64..5.0) {
            let eigs = quadratic(10);
            let f = tanh_family(&eigs);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = eigs.weights(0.5);
            let mut u = sample_ball(&mut rng, &w, 1.0);
            let norm = weighted(&u, &w);
            for x in &mut u {
                *x *= f.support_radius() * scale / norm * (1.0 + 1e-12);
            }
            prop_assert!(f.eval(&u).iter().all(|x| *x == 0.0));
        }

        #[test]
        fn plateau_equals_raw_map(seed in 0u64..1000) {
            let eigs = quadratic(10);
            let f = tanh_family(&eigs);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = sample_ball(&mut rng, &eigs.weights(0.5), f.support_radius() / 2.0);
            prop_assert_eq!(f.eval(&u), tanh_eval(&u, 0.3, 0.7, 0.8));
        }

        #[test]
        fn rho_is_symmetric_with_identity_pair(seed in 0u64..200, eps in -0.1f64..0.1) {
            let eigs = quadratic(6);
            let f0 = tanh_family(&eigs);
            let fe = f0.with_forcing(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], eps).unwrap();
            let pair = ComparisonPair::identity(6);
            let a = rho_distance(&fe, &f0, &eigs, &pair, 50, seed).unwrap();
            let b = rho_distance(&f0, &fe, &eigs, &pair, 50, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn odd_symmetry_of_tanh_family(seed in 0u64..500) {
            let eigs = quadratic(10);
            let f = tanh_family(&eigs);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = sample_ball(&mut rng, &eigs.weights(0.5), f.support_radius());
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let a = f.eval(&u);
            let b = f.eval(&neg);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
