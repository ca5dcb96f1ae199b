//! Experiment driver: perturbation families, distance sweeps over `eps`,
//! rate fitting, report persistence and the built-in verifier suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::{self, LemmaCheckReport};
use crate::manifold::{self, fixed_point, Grid, ManifoldGraph, ManifoldProblem, SolverConfig};
use crate::nonlinearity::{rho_distance, DecoupledParams, NonlinearitySpec, TanhParams};
use crate::spectral::{weighted_norm, ComparisonPair, Direction, EigenData, Part};

pub const SCHEMA_VERSION: &str = "manifold-gap/1";

/// Default geometric parameter list.
pub const DEFAULT_EPS: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

/// Largest rotation angle allowed on a mode pair straddling the slow/fast split.
const MAX_STRADDLE_ANGLE: f64 = 0.25;

/// Spectrum of the unperturbed operator (eigenbasis = standard basis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    /// `lambda_i = i^2`, `i = 1..=n`.
    Quadratic { n: usize },
    /// `lambda_i = 1 + gap (i - 1)`.
    LinearGapped { n: usize, gap: f64 },
    Explicit { eigenvalues: Vec<f64> },
}

impl SpectrumSpec {
    pub fn eigen_data(&self) -> Result<EigenData> {
        let values = match self {
            SpectrumSpec::Quadratic { n } => (1..=*n).map(|i| (i * i) as f64).collect(),
            SpectrumSpec::LinearGapped { n, gap } => {
                if !(*gap > 0.0) {
                    return Err(Error::invalid("linear-gapped spectrum needs gap > 0"));
                }
                (0..*n).map(|i| 1.0 + gap * i as f64).collect()
            }
            SpectrumSpec::Explicit { eigenvalues } => eigenvalues.clone(),
        };
        if values.len() < 2 {
            return Err(Error::invalid("spectrum needs at least two modes"));
        }
        EigenData::diagonal(values)
    }
}

/// Nonlinearity of the unperturbed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityChoice {
    Zero,
    /// Constant forcing `q` inside a cutoff ball of radius `R`.
    Constant {
        q: Vec<f64>,
        #[serde(rename = "R")]
        radius: f64,
    },
    Tanh(TanhParams),
    Decoupled(DecoupledParams),
}

impl NonlinearityChoice {
    pub fn build(&self, eigs: &EigenData, alpha: f64, m: usize) -> Result<NonlinearitySpec> {
        match self {
            NonlinearityChoice::Zero => Ok(NonlinearitySpec::zero(eigs, alpha)),
            NonlinearityChoice::Constant { q, radius } => {
                NonlinearitySpec::constant(eigs, alpha, q.clone(), *radius)
            }
            NonlinearityChoice::Tanh(p) => NonlinearitySpec::tanh(eigs, alpha, *p),
            NonlinearityChoice::Decoupled(p) => NonlinearitySpec::decoupled(eigs, alpha, m, *p),
        }
    }
}

/// The unperturbed problem `(A_0, F_0)` with its splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub spectrum: SpectrumSpec,
    pub alpha: f64,
    pub m: usize,
    pub nonlinearity: NonlinearityChoice,
}

impl ProblemSpec {
    /// Quadratic spectrum on 64 modes, `alpha = 1/2`, `m = 1`, a small
    /// coupled tanh nonlinearity.
    pub fn default_sweep() -> Self {
        Self {
            spectrum: SpectrumSpec::Quadratic { n: 64 },
            alpha: 0.5,
            m: 1,
            nonlinearity: NonlinearityChoice::Tanh(TanhParams {
                amp: 0.01,
                decay: 0.5,
                weight: 1.0,
                radius: 4.0,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha = {} outside [0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<(Arc<EigenData>, NonlinearitySpec)> {
        self.validate()?;
        let eigs = self.spectrum.eigen_data()?;
        if self.m == 0 || self.m >= eigs.len() {
            return Err(Error::invalid(format!("m = {} outside 1..N", self.m)));
        }
        let f = self.nonlinearity.build(&eigs, self.alpha, self.m)?;
        Ok((Arc::new(eigs), f))
    }

    pub fn problem(&self) -> Result<ManifoldProblem> {
        let (eigs, f) = self.build()?;
        let n = eigs.len();
        ManifoldProblem::new(eigs, self.m, &ComparisonPair::identity(n), f, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    EigenShift,
    Rotation,
    ForcingShift,
    Combined,
}

impl FamilyKind {
    fn shifts(self) -> bool {
        matches!(self, FamilyKind::EigenShift | FamilyKind::Combined)
    }
    fn rotates(self) -> bool {
        matches!(self, FamilyKind::Rotation | FamilyKind::Combined)
    }
    fn forces(self) -> bool {
        matches!(self, FamilyKind::ForcingShift | FamilyKind::Combined)
    }
}

/// Family parameters; `None` entries take defaults depending on `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    /// Eigenvalue directions `lambda_i^eps = lambda_i + eps delta_i`; default `delta_i = i`.
    #[serde(default)]
    pub delta: Option<Vec<f64>>,
    /// Mode pairs (1-based) rotated by angle `eps`; default `[[m+1, m+2]]`.
    #[serde(default)]
    pub rotations: Option<Vec<[usize; 2]>>,
    /// Forcing direction `q`; default `0.01 e_{m+1}`.
    #[serde(default)]
    pub forcing: Option<Vec<f64>>,
    /// Largest admissible parameter.
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
}

fn default_eps_max() -> f64 {
    0.1
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            delta: None,
            rotations: None,
            forcing: None,
            eps_max: default_eps_max(),
        }
    }
}

/// Resolved parameters of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySnapshot {
    pub kind: FamilyKind,
    pub delta: Vec<f64>,
    pub rotations: Vec<[usize; 2]>,
    pub forcing: Vec<f64>,
    pub eps_max: f64,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
}

/// A map `eps -> (A_eps, (E, M), F_eps)` around a fixed base problem.
#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    pub name: String,
    eigs0: Arc<EigenData>,
    f0: NonlinearitySpec,
    snapshot: FamilySnapshot,
}

/// One member of a family.
#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub eps: f64,
    pub eigs: Arc<EigenData>,
    pub pair: ComparisonPair,
    pub f: NonlinearitySpec,
    pub tau_analytic: Option<f64>,
    pub rho_analytic: Option<f64>,
}

pub fn make_family(
    kind: FamilyKind,
    params: &FamilyParams,
    eigs0: Arc<EigenData>,
    f0: NonlinearitySpec,
    m: usize,
) -> Result<PerturbationFamily> {
    let n = eigs0.len();
    let alpha = f0.alpha();
    if m == 0 || m >= n {
        return Err(Error::invalid(format!("m = {m} outside 1..N")));
    }
    if !(params.eps_max > 0.0 && params.eps_max.is_finite()) {
        return Err(Error::invalid("eps_max must be positive"));
    }
    let delta = match &params.delta {
        Some(d) if d.len() != n => return Err(Error::invalid("delta has the wrong length")),
        Some(d) => d.clone(),
        None => (1..=n).map(|i| i as f64).collect(),
    };
    let rotations = match &params.rotations {
        Some(r) => r.clone(),
        None if m + 2 <= n => vec![[m + 1, m + 2]],
        None => Vec::new(),
    };
    for &[i, j] in &rotations {
        if i == 0 || j == 0 || i > n || j > n || i == j {
            return Err(Error::invalid(format!("rotation pair [{i}, {j}] invalid for N = {n}")));
        }
        let straddles = i.min(j) <= m && i.max(j) > m;
        if kind.rotates() && straddles && params.eps_max > MAX_STRADDLE_ANGLE {
            return Err(Error::invalid(format!(
                "rotation of modes [{i}, {j}] by up to {} rad mixes slow and fast modes enough to close the spectral gap (limit {MAX_STRADDLE_ANGLE})",
                params.eps_max
            )));
        }
    }
    let forcing = match &params.forcing {
        Some(q) if q.len() != n => return Err(Error::invalid("forcing has the wrong length")),
        Some(q) => q.clone(),
        None => {
            let mut q = vec![0.0; n];
            q[m] = 0.01;
            q
        }
    };
    let name = match kind {
        FamilyKind::EigenShift => "eigen_shift",
        FamilyKind::Rotation => "rotation",
        FamilyKind::ForcingShift => "forcing_shift",
        FamilyKind::Combined => "combined",
    }
    .to_string();
    let family = PerturbationFamily {
        name,
        snapshot: FamilySnapshot {
            kind,
            delta,
            rotations,
            forcing,
            eps_max: params.eps_max,
            n,
            m,
            alpha,
        },
        eigs0,
        f0,
    };
    // Fail early on parameters that break the largest member.
    family.member(params.eps_max)?;
    Ok(family)
}

fn givens(n: usize, pairs: &[[usize; 2]], angle: f64) -> DMatrix<f64> {
    let mut g = DMatrix::<f64>::identity(n, n);
    let (s, c) = angle.sin_cos();
    for &[i, j] in pairs {
        let (i, j) = (i - 1, j - 1);
        let mut rot = DMatrix::<f64>::identity(n, n);
        rot[(i, i)] = c;
        rot[(j, j)] = c;
        rot[(i, j)] = -s;
        rot[(j, i)] = s;
        g = rot * g;
    }
    g
}

impl PerturbationFamily {
    pub fn kind(&self) -> FamilyKind {
        self.snapshot.kind
    }

    pub fn snapshot(&self) -> &FamilySnapshot {
        &self.snapshot
    }

    pub fn base_eigs(&self) -> &Arc<EigenData> {
        &self.eigs0
    }

    pub fn base_nonlinearity(&self) -> &NonlinearitySpec {
        &self.f0
    }

    pub fn m(&self) -> usize {
        self.snapshot.m
    }

    pub fn alpha(&self) -> f64 {
        self.snapshot.alpha
    }

    pub fn base_problem(&self) -> Result<ManifoldProblem> {
        let n = self.eigs0.len();
        ManifoldProblem::new(
            self.eigs0.clone(),
            self.m(),
            &ComparisonPair::identity(n),
            self.f0.clone(),
            self.alpha(),
        )
    }

    /// The member at `eps`; `eps = 0` returns the base problem with `E = I`.
    pub fn member(&self, eps: f64) -> Result<FamilyMember> {
        let s = &self.snapshot;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("eps = {eps} must be finite and >= 0")));
        }
        if eps > s.eps_max * (1.0 + 1e-12) {
            return Err(Error::invalid(format!("eps = {eps} exceeds eps_max = {}", s.eps_max)));
        }
        let n = s.n;
        if eps == 0.0 {
            return Ok(FamilyMember {
                eps,
                eigs: self.eigs0.clone(),
                pair: ComparisonPair::identity(n),
                f: self.f0.clone(),
                tau_analytic: Some(0.0),
                rho_analytic: Some(0.0),
            });
        }
        let kind = s.kind;
        let values: Vec<f64> = if kind.shifts() {
            self.eigs0
                .eigenvalues()
                .iter()
                .zip(&s.delta)
                .map(|(l, d)| l + eps * d)
                .collect()
        } else {
            self.eigs0.eigenvalues().to_vec()
        };
        let basis = if kind.rotates() {
            self.eigs0.basis() * givens(n, &s.rotations, eps)
        } else {
            self.eigs0.basis().clone()
        };
        let eigs = Arc::new(EigenData::new(values, basis)?);
        let pair = if kind.rotates() {
            ComparisonPair::new(&self.eigs0, &eigs, DMatrix::identity(n, n), s.alpha)?
        } else {
            ComparisonPair::identity(n)
        };
        let forced = if kind.forces() {
            self.f0.with_forcing(&s.forcing, eps)?
        } else {
            self.f0.clone()
        };
        let f = forced.transported(&self.eigs0, &eigs, &pair)?;
        let tau_analytic = match kind {
            FamilyKind::EigenShift => Some(estimates::tau_diagonal(&eigs, &self.eigs0, s.alpha)),
            FamilyKind::ForcingShift => Some(0.0),
            _ => None,
        };
        // F_eps(E u) - E F_0(u) = theta(u) eps E q, and theta = 1 at u = 0.
        let rho_analytic = if kind.forces() {
            let eq = pair.apply(Direction::E, &s.forcing);
            Some(eps * eq.iter().map(|x| x * x).sum::<f64>().sqrt())
        } else {
            Some(0.0)
        };
        Ok(FamilyMember {
            eps,
            eigs,
            pair,
            f,
            tau_analytic,
            rho_analytic,
        })
    }
}

/// Options of a sweep beyond the solver configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    /// Lipschitz constant used in the gap checks; must dominate every member's
    /// `L_F`. Defaults to the largest member value.
    #[serde(default)]
    pub l_f_budget: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Samples for the empirical `rho` when no closed form exists.
    #[serde(default = "default_rho_samples")]
    pub rho_samples: usize,
}

fn default_rho_samples() -> usize {
    4000
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            l_f_budget: None,
            seed: 0,
            rho_samples: default_rho_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub eps: f64,
    pub tau: f64,
    pub tau_analytic: Option<f64>,
    pub rho: f64,
    pub rho_analytic: bool,
    pub m: usize,
    pub l_f: f64,
    /// Max over grid nodes of `|Phi_eps(p) - E Phi_0(p)|_{X_eps^alpha}`.
    pub dist: f64,
    /// Node attaining `dist`.
    pub argmax: Vec<f64>,
    pub bound: f64,
    pub ratio: f64,
    pub iterations: usize,
    pub median_contraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `log d` against `log eps`.
    pub eps: LineFit,
    /// `log d` against `log B`, when at least three bounds are positive.
    pub bound: Option<LineFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub family: FamilySnapshot,
    pub solver: SolverConfig,
    pub options: SweepOptions,
    pub l_f_budget: f64,
    pub grid: Grid,
    /// Sorted by decreasing `eps`.
    pub records: Vec<SweepRecord>,
    pub fit: Option<RateFit>,
}

fn ratio(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 && bound == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        measured / bound
    }
}

/// `max_nodes |Phi_eps - E Phi_0|` in the `alpha`-norm of `eigs_eps`, and the arg-max node.
pub fn graph_distance(
    phi_eps: &ManifoldGraph,
    phi_0: &ManifoldGraph,
    pair: &ComparisonPair,
    eigs_eps: &EigenData,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if phi_eps.grid != phi_0.grid || phi_eps.m != phi_0.m {
        return Err(Error::invalid("graphs live on different grids"));
    }
    let m = phi_0.m;
    let n = m + phi_0.q_dim();
    let mut best = (0.0_f64, phi_0.grid.node(0));
    let mut full = vec![0.0; n];
    for idx in 0..phi_0.grid.len() {
        full[..m].iter_mut().for_each(|x| *x = 0.0);
        full[m..].copy_from_slice(&phi_0.values[idx]);
        let mut diff = pair.apply(Direction::E, &full);
        for (i, d) in diff.iter_mut().enumerate() {
            let own = if i < m { 0.0 } else { phi_eps.values[idx][i - m] };
            *d = own - *d;
        }
        let v = weighted_norm(&diff, eigs_eps.eigenvalues(), alpha);
        if v > best.0 {
            best = (v, phi_0.grid.node(idx));
        }
    }
    Ok(best)
}

/// Builds `Phi_0` once and `Phi_eps` for every `eps` on the same grid, and
/// records `tau`, `rho`, the graph distance and the rate function `B`.
pub fn run_sweep(
    family: &PerturbationFamily,
    eps_list: &[f64],
    cfg: &SolverConfig,
    options: &SweepOptions,
) -> Result<SweepReport> {
    cfg.validate()?;
    if eps_list.is_empty() {
        return Err(Error::invalid("empty eps list"));
    }
    let m = family.m();
    let alpha = family.alpha();
    let eigs0 = family.base_eigs().clone();
    let members: Vec<FamilyMember> = eps_list
        .iter()
        .map(|&e| family.member(e))
        .collect::<Result<_>>()?;

    let largest = members
        .iter()
        .map(|mb| mb.f.l_f())
        .fold(family.base_nonlinearity().l_f(), f64::max);
    let budget = options.l_f_budget.unwrap_or(largest);
    if !(budget >= 0.0) {
        return Err(Error::invalid("L_F budget must be >= 0"));
    }
    let check = |eigs: &EigenData, l_f: f64, eps: Option<f64>| -> Result<()> {
        let tag = |e: Error| match eps {
            Some(x) => e.at_eps(x),
            None => e,
        };
        if l_f > budget * (1.0 + 1e-12) {
            return Err(tag(Error::GapCondition {
                reason: format!("L_F = {l_f:.6e} exceeds the budget {budget:.6e}"),
                context: String::new(),
            }));
        }
        let report = estimates::gap_check(&eigs0, eigs, budget, alpha);
        if !report.admissible.contains(&m) {
            let g = report.margins_at(m);
            return Err(tag(Error::GapCondition {
                reason: format!("m = {m} not admissible for L_F = {budget:.6e}: {g:?}"),
                context: String::new(),
            }));
        }
        Ok(())
    };
    check(&eigs0, family.base_nonlinearity().l_f(), None)?;
    for mb in &members {
        check(&mb.eigs, mb.f.l_f(), Some(mb.eps))?;
    }

    let problems: Vec<ManifoldProblem> = members
        .iter()
        .map(|mb| ManifoldProblem::new(mb.eigs.clone(), m, &mb.pair, mb.f.clone(), alpha))
        .collect::<Result<_>>()?;
    let problem0 = family.base_problem()?;
    let radius = problems
        .iter()
        .map(|p| p.support_radius())
        .fold(problem0.support_radius(), f64::max);
    let grid = cfg.grid(m, radius)?;
    let phi0 = fixed_point(&problem0, grid, cfg)?;

    let mut records: Vec<SweepRecord> = members
        .par_iter()
        .zip(problems.par_iter())
        .map(|(mb, problem)| -> Result<SweepRecord> {
            let phi = if mb.eps == 0.0 {
                phi0.clone()
            } else {
                fixed_point(problem, grid, cfg).map_err(|e| e.at_eps(mb.eps))?
            };
            let (dist, argmax) = graph_distance(&phi, &phi0, &mb.pair, &mb.eigs, alpha)?;
            let tau = estimates::tau_of(&mb.eigs, &eigs0, &mb.pair, alpha);
            let (rho, rho_analytic) = match mb.rho_analytic {
                Some(r) => (r, true),
                None => (
                    rho_distance(
                        &mb.f,
                        family.base_nonlinearity(),
                        &eigs0,
                        &mb.pair,
                        options.rho_samples,
                        options.seed,
                    )?,
                    false,
                ),
            };
            let bound = estimates::rate_bound(tau, rho);
            Ok(SweepRecord {
                eps: mb.eps,
                tau,
                tau_analytic: mb.tau_analytic,
                rho,
                rho_analytic,
                m,
                l_f: mb.f.l_f(),
                dist,
                argmax,
                bound,
                ratio: ratio(dist, bound),
                iterations: phi.history.len(),
                median_contraction: phi.median_ratio(),
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| b.eps.total_cmp(&a.eps));

    let mut report = SweepReport {
        schema: SCHEMA_VERSION.to_string(),
        family: family.snapshot().clone(),
        solver: *cfg,
        options: *options,
        l_f_budget: budget,
        grid,
        records,
        fit: None,
    };
    report.fit = fit_rate(&report).ok();
    Ok(report)
}

fn line_fit(points: &[(f64, f64)]) -> LineFit {
    let (slope, intercept, residual) = manifold::least_squares(points);
    LineFit {
        slope,
        intercept,
        residual,
    }
}

/// Least squares of `log d` against `log eps`, and of `log d` against `log B`.
pub fn fit_rate(report: &SweepReport) -> Result<RateFit> {
    let usable: Vec<&SweepRecord> = report
        .records
        .iter()
        .filter(|r| r.eps > 0.0 && r.dist > 0.0)
        .collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs 3 records with eps > 0 and d > 0, found {}",
            usable.len()
        )));
    }
    let eps: Vec<(f64, f64)> = usable.iter().map(|r| (r.eps.ln(), r.dist.ln())).collect();
    let vs_b: Vec<(f64, f64)> = usable
        .iter()
        .filter(|r| r.bound > 0.0)
        .map(|r| (r.bound.ln(), r.dist.ln()))
        .collect();
    Ok(RateFit {
        eps: line_fit(&eps),
        bound: (vs_b.len() >= 3).then(|| line_fit(&vs_b)),
    })
}

impl SweepReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.eps > 0.0).map(|r| r.ratio).collect()
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios().into_iter().fold(0.0, f64::max)
    }

    pub fn median_ratio(&self) -> Option<f64> {
        manifold::median(&self.ratios())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>")
            .to_string();
        if found != SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION.to_string(),
                found,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,tau,rho,dist,bound,ratio\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e}",
                r.eps, r.tau, r.rho, r.dist, r.bound, r.ratio
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>10} {:>12} {:>12} {:>12} {:>12} {:>10}\n",
            "eps", "tau", "rho", "dist", "bound", "ratio"
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:>10.3e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4}",
                r.eps, r.tau, r.rho, r.dist, r.bound, r.ratio
            );
        }
        out
    }
}

/// Companion CSV path: same stem, `.csv` extension.
pub fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes the JSON report to `path` and the CSV table next to it.
pub fn write_report(report: &SweepReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))?;
    let csv = csv_path(path);
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<SweepReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SweepReport::from_json(&text)
}

/// Lemma identifiers accepted by [`verify_builtin`].
pub const LEMMAS: [&str; 10] = ["3.1", "3.2", "3.4", "3.7", "3.9", "3.10", "5.1", "5.2", "5.3", "5.4"];

/// Parameters at which the built-in verifier suite runs.
pub const VERIFY_EPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

fn verify_families() -> Result<Vec<PerturbationFamily>> {
    let spec = ProblemSpec::default_sweep();
    let (eigs, f) = spec.build()?;
    let mut out = Vec::new();
    for m in [1usize, 2] {
        out.push(make_family(
            FamilyKind::EigenShift,
            &FamilyParams::default(),
            eigs.clone(),
            f.clone(),
            m,
        )?);
        out.push(make_family(
            FamilyKind::Rotation,
            &FamilyParams {
                rotations: Some(vec![[1, 2], [m + 1, m + 3]]),
                ..FamilyParams::default()
            },
            eigs.clone(),
            f.clone(),
            m,
        )?);
    }
    Ok(out)
}

/// Runs the numerical checks of one lemma (or `"all"`) on the built-in
/// families at `eps in {1e-1, 1e-2, 1e-3}`; one merged report per lemma.
pub fn verify_builtin(selector: &str) -> Result<Vec<LemmaCheckReport>> {
    let selected: Vec<&str> = if selector == "all" {
        LEMMAS.to_vec()
    } else if let Some(l) = LEMMAS.iter().find(|l| **l == selector) {
        vec![*l]
    } else {
        return Err(Error::invalid(format!(
            "unknown lemma selector {selector:?}; expected one of {} or \"all\"",
            LEMMAS.join(", ")
        )));
    };
    let families = verify_families()?;
    let positive = estimates::log_grid(1e-3, 10.0, 41);
    let nonpositive = estimates::lin_grid(-3.0, 0.0, 31);
    let lambdas = [
        Complex64::new(0.0, 0.0),
        Complex64::new(-2.5, 0.5),
        Complex64::new(-2.0, 1.0),
        Complex64::new(3.0, -4.0),
        Complex64::new(-12.0, 0.25),
        Complex64::new(-40.0, -3.0),
        Complex64::new(-6.5, 6.5),
    ];
    selected
        .par_iter()
        .map(|&lemma| -> Result<LemmaCheckReport> {
            let mut merged: Option<LemmaCheckReport> = None;
            let mut add = |r: LemmaCheckReport| match &mut merged {
                Some(acc) => acc.merge(&r),
                None => merged = Some(r),
            };
            match lemma {
                "3.10" => {
                    for tau in [1e-2, 1e-4, 1e-6] {
                        add(estimates::verify_integral_bounds(tau, 0.5, 0.5, 1.0, &[0.01, 0.1, 1.0, 10.0])?);
                    }
                    add(estimates::verify_integral_bounds(1e-3, 0.5, 0.5, 1.0, &[1.0])?);
                }
                "5.2" => {
                    for lambda in [1.0, 4.0, 16.0] {
                        for a in [0.5, 1.0, 3.0] {
                            add(estimates::verify_exponential_integral(lambda, 0.5, a));
                        }
                    }
                }
                "3.1" => {
                    add(estimates::verify_semigroup_decay(families[0].base_eigs(), 0.5, &positive));
                    for f in &families {
                        for &eps in &VERIFY_EPS {
                            let mb = f.member(eps)?;
                            add(estimates::verify_semigroup_decay(&mb.eigs, 0.5, &positive));
                        }
                    }
                }
                "3.2" => {
                    for f in &families {
                        let spectra: Vec<EigenData> = VERIFY_EPS
                            .iter()
                            .map(|&e| f.member(e).map(|mb| (*mb.eigs).clone()))
                            .collect::<Result<_>>()?;
                        add(estimates::verify_eigen_convergence(f.base_eigs(), &spectra, f.m()));
                    }
                }
                _ => {
                    for f in &families {
                        let e0 = f.base_eigs();
                        let m = f.m();
                        for &eps in &VERIFY_EPS {
                            let mb = f.member(eps)?;
                            let tau = estimates::tau_of(&mb.eigs, e0, &mb.pair, 0.5);
                            let r = match lemma {
                                "3.4" => estimates::verify_resolvent_identity(&mb.eigs, e0, &mb.pair, 0.5, &lambdas)?,
                                "3.7" => estimates::verify_projection_distance(&mb.eigs, e0, &mb.pair, m, 0.5, tau)?,
                                "3.9" => estimates::verify_semigroup_distance(&mb.eigs, e0, &mb.pair, m, 0.5, tau, &positive, Part::Full)?,
                                "5.1" => estimates::verify_semigroup_distance(&mb.eigs, e0, &mb.pair, m, 0.5, tau, &nonpositive, Part::P)?,
                                "5.3" => estimates::verify_semigroup_distance(&mb.eigs, e0, &mb.pair, m, 0.5, tau, &positive, Part::Q)?,
                                "5.4" => estimates::verify_coordinate_comparison(&mb.eigs, e0, &mb.pair, m, 0.5, tau, 1000, 17)?,
                                _ => unreachable!(),
                            };
                            add(r);
                        }
                    }
                }
            }
            Ok(merged.expect("every lemma adds at least one report"))
        })
        .collect()
}
