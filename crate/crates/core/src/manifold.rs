//! Inertial manifolds as fixed points of the Lyapunov-Perron operator
//!
//! `(T Phi)(p0) = \int_{-inf}^0 e^{A Q s} Q F(p(s) + Phi(j(p(s)))) ds`,
//!
//! where `p` solves the slow equation `p' = -A p + P F(p + Phi(j(p)))`
//! backward from `p(0) = j^{-1}(p0)`. A graph `Phi` is stored on a regular
//! grid over the coordinate space `R^m` and interpolated multilinearly.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates;
use crate::nonlinearity::NonlinearitySpec;
use crate::spectral::{weighted_norm, ComparisonPair, CoordinateMap, EigenData, SpectralSplit};

/// Guard factor on the a-priori growth bound of backward trajectories.
const BLOWUP_FACTOR: f64 = 10.0;
/// Consecutive non-decreasing sup changes tolerated before giving up.
const STALL_LIMIT: usize = 3;

/// Numerical parameters of the fixed-point construction. `None` entries are
/// derived from the problem: the horizon from `tail_tol`, the grid from the
/// support radius `R` (extent `1.25 R`, spacing `R / 16`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default)]
    pub t_trunc: Option<f64>,
    #[serde(default)]
    pub grid_extent: Option<f64>,
    #[serde(default)]
    pub grid_h: Option<f64>,
    #[serde(default = "defaults::fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "defaults::fp_max_iter")]
    pub fp_max_iter: usize,
    #[serde(default = "defaults::tail_tol")]
    pub tail_tol: f64,
}

mod defaults {
    pub fn dt() -> f64 {
        2e-3
    }
    pub fn fp_tol() -> f64 {
        1e-8
    }
    pub fn fp_max_iter() -> usize {
        50
    }
    pub fn tail_tol() -> f64 {
        1e-8
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: defaults::dt(),
            t_trunc: None,
            grid_extent: None,
            grid_h: None,
            fp_tol: defaults::fp_tol(),
            fp_max_iter: defaults::fp_max_iter(),
            tail_tol: defaults::tail_tol(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::invalid("fp_tol must be positive"));
        }
        if !(self.tail_tol > 0.0) {
            return Err(Error::invalid("tail_tol must be positive"));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::invalid("fp_max_iter must be at least 1"));
        }
        if let Some(t) = self.t_trunc {
            if !(t > 0.0) {
                return Err(Error::invalid("t_trunc must be positive"));
            }
            let steps = t / self.dt;
            if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                return Err(Error::invalid(format!(
                    "t_trunc = {t} is not a multiple of dt = {}",
                    self.dt
                )));
            }
        }
        Ok(())
    }

    /// Backward horizon: the configured one, or the smallest multiple of `dt`
    /// of at least `max(1, ln(C_F lambda_{m+1}^{alpha-1} / tail_tol) / lambda_{m+1})`.
    pub fn horizon(&self, c_f: f64, lambda_next: f64, alpha: f64) -> f64 {
        if let Some(t) = self.t_trunc {
            return t;
        }
        let t = if c_f > 0.0 {
            ((c_f * lambda_next.powf(alpha - 1.0) / self.tail_tol).ln() / lambda_next).max(1.0)
        } else {
            1.0
        };
        (t / self.dt - 1e-9).ceil() * self.dt
    }

    /// Grid around the support ball of radius `radius`.
    pub fn grid(&self, m: usize, radius: f64) -> Result<Grid> {
        let extent = self.grid_extent.unwrap_or(1.25 * radius);
        let h = self.grid_h.unwrap_or(radius / 16.0);
        Grid::new(m, extent, h)
    }
}

/// Tail of the truncated integral in the `alpha`-norm:
/// `C_F lambda_{m+1}^{alpha-1} e^{-lambda_{m+1} T}`.
pub fn tail_bound(c_f: f64, lambda_next: f64, alpha: f64, t: f64) -> f64 {
    c_f * lambda_next.powf(alpha - 1.0) * (-lambda_next * t).exp()
}

/// Regular lattice `{-extent + k h}^m`, nodes in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub extent: f64,
    pub h: f64,
    pub per_axis: usize,
}

impl Grid {
    pub fn new(m: usize, extent: f64, h: f64) -> Result<Self> {
        if !(1..=3).contains(&m) {
            return Err(Error::invalid(format!("grids support m in 1..=3, got {m}")));
        }
        if !(extent > 0.0 && h > 0.0 && extent.is_finite()) {
            return Err(Error::invalid("grid extent and spacing must be positive"));
        }
        let cells = 2.0 * extent / h;
        if (cells - cells.round()).abs() > 1e-9 * cells {
            return Err(Error::invalid(format!(
                "grid spacing {h} does not divide the width {}",
                2.0 * extent
            )));
        }
        let per_axis = cells.round() as usize + 1;
        if per_axis.pow(m as u32) > 1_000_000 {
            return Err(Error::invalid("grid has more than 10^6 nodes"));
        }
        Ok(Self {
            m,
            extent,
            h,
            per_axis,
        })
    }

    pub fn len(&self) -> usize {
        self.per_axis.pow(self.m as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis_value(&self, k: usize) -> f64 {
        -self.extent + k as f64 * self.h
    }

    /// Multi-index of node `idx` (row-major, last axis fastest).
    pub fn index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.m];
        for d in (0..self.m).rev() {
            out[d] = idx % self.per_axis;
            idx /= self.per_axis;
        }
        out
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &k| acc * self.per_axis + k)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.index(idx).iter().map(|&k| self.axis_value(k)).collect()
    }

    /// A grid with half the spacing over the same extent.
    pub fn refined(&self) -> Result<Self> {
        Grid::new(self.m, self.extent, self.h / 2.0)
    }
}

/// The inputs fixed for one problem `(A, F)`: eigen-data, splitting,
/// coordinate isomorphism and prepared nonlinearity.
#[derive(Debug, Clone)]
pub struct ManifoldProblem {
    eigs: Arc<EigenData>,
    split: SpectralSplit,
    coords: CoordinateMap,
    f: NonlinearitySpec,
    alpha: f64,
    weights: Vec<f64>,
}

impl ManifoldProblem {
    pub fn new(
        eigs: Arc<EigenData>,
        m: usize,
        pair: &ComparisonPair,
        f: NonlinearitySpec,
        alpha: f64,
    ) -> Result<Self> {
        let split = SpectralSplit::new(&eigs, m)?;
        if m >= eigs.len() {
            return Err(Error::invalid("need at least one fast mode"));
        }
        if f.dim() != eigs.len() {
            return Err(Error::invalid("nonlinearity and operator dimensions disagree"));
        }
        if (f.alpha() - alpha).abs() > 0.0 {
            return Err(Error::invalid("nonlinearity certified for another alpha"));
        }
        let coords = CoordinateMap::new(&split, pair)?;
        let weights = eigs.weights(alpha);
        Ok(Self {
            eigs,
            split,
            coords,
            f,
            alpha,
            weights,
        })
    }

    pub fn eigs(&self) -> &EigenData {
        &self.eigs
    }

    pub fn split(&self) -> &SpectralSplit {
        &self.split
    }

    pub fn coords(&self) -> &CoordinateMap {
        &self.coords
    }

    pub fn nonlinearity(&self) -> &NonlinearitySpec {
        &self.f
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn m(&self) -> usize {
        self.split.m()
    }

    pub fn n(&self) -> usize {
        self.split.n()
    }

    /// `lambda_i^alpha` for all modes.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn p_weights(&self) -> &[f64] {
        &self.weights[..self.m()]
    }

    pub fn q_weights(&self) -> &[f64] {
        &self.weights[self.m()..]
    }

    /// `|p_bar|_alpha` against the leading eigenvalues.
    pub fn coord_norm(&self, p_bar: &[f64]) -> f64 {
        weighted_norm(p_bar, self.eigs.eigenvalues(), self.alpha)
    }

    /// `alpha`-norm of a vector of Q coefficients.
    pub fn q_norm(&self, q: &[f64]) -> f64 {
        weighted_norm(q, &self.eigs.eigenvalues()[self.m()..], self.alpha)
    }

    pub fn horizon(&self, cfg: &SolverConfig) -> f64 {
        cfg.horizon(self.f.c_f(), self.eigs.lambda(self.m()), self.alpha)
    }

    /// Graph-support radius `R` in the coordinate norm.
    pub fn support_radius(&self) -> f64 {
        self.f.support_radius()
    }

    /// Lemma-5.5 growth bound of backward slow trajectories at time `s <= 0`.
    pub fn growth_bound(&self, p0_norm: f64, s: f64) -> f64 {
        let lm = self.eigs.lambda(self.m() - 1);
        (p0_norm + self.f.c_f() / lm.powf(1.0 - self.alpha)) * (-lm * s).exp()
    }
}

/// A Lipschitz graph `Phi : R^m -> Q X^alpha` sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldGraph {
    pub m: usize,
    pub alpha: f64,
    #[serde(rename = "R")]
    pub support_radius: f64,
    pub grid: Grid,
    /// Eigenvalues of the owning operator; they define the norms.
    pub eigenvalues: Vec<f64>,
    /// Per node (row-major), the `N - m` Q coefficients.
    pub values: Vec<Vec<f64>>,
    /// Sup-norm change of each fixed-point sweep.
    pub history: Vec<f64>,
}

impl ManifoldGraph {
    pub fn zeros(problem: &ManifoldProblem, grid: Grid) -> Self {
        Self {
            m: problem.m(),
            alpha: problem.alpha(),
            support_radius: problem.support_radius(),
            grid,
            eigenvalues: problem.eigs().eigenvalues().to_vec(),
            values: vec![vec![0.0; problem.n() - problem.m()]; grid.len()],
            history: Vec::new(),
        }
    }

    pub fn q_dim(&self) -> usize {
        self.eigenvalues.len() - self.m
    }

    pub fn coord_norm(&self, p_bar: &[f64]) -> f64 {
        weighted_norm(p_bar, &self.eigenvalues, self.alpha)
    }

    pub fn q_norm(&self, q: &[f64]) -> f64 {
        weighted_norm(q, &self.eigenvalues[self.m..], self.alpha)
    }

    /// Successive ratios of the sup changes.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.history
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }

    pub fn median_ratio(&self) -> Option<f64> {
        median(&self.contraction_ratios())
    }

    /// Largest `alpha`-norm of a node value.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| self.q_norm(v)).fold(0.0, f64::max)
    }

    /// Writes `Phi(p_bar)` into `out`.
    pub fn evaluate_into(&self, p_bar: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        if self.coord_norm(p_bar) > self.support_radius {
            return;
        }
        let g = &self.grid;
        let last = g.per_axis - 1;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..self.m {
            let t = (p_bar[d] + g.extent) / g.h;
            if !(t >= 0.0 && t <= last as f64) {
                return;
            }
            let i = (t.floor() as usize).min(last - 1);
            base[d] = i;
            frac[d] = t - i as f64;
        }
        let mut multi = [0usize; 3];
        for corner in 0..(1usize << self.m) {
            let mut weight = 1.0;
            for d in 0..self.m {
                let up = (corner >> d) & 1 == 1;
                multi[d] = base[d] + usize::from(up);
                weight *= if up { frac[d] } else { 1.0 - frac[d] };
            }
            if weight == 0.0 {
                continue;
            }
            let v = &self.values[g.flat(&multi[..self.m])];
            for (o, x) in out.iter_mut().zip(v) {
                *o += weight * x;
            }
        }
    }

    /// Multilinear interpolation; zero outside the support ball and the grid.
    pub fn evaluate(&self, p_bar: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q_dim()];
        self.evaluate_into(p_bar, &mut out);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per node: coordinates, `|Phi|_alpha`, and up to four leading Q modes.
    pub fn to_csv(&self) -> String {
        let lead = self.q_dim().min(4);
        let mut s = String::new();
        let coords: Vec<String> = (1..=self.m).map(|d| format!("p{d}")).collect();
        let modes: Vec<String> = (0..lead).map(|k| format!("q{}", self.m + k + 1)).collect();
        let _ = writeln!(s, "{},phi_norm,{}", coords.join(","), modes.join(","));
        for (idx, v) in self.values.iter().enumerate() {
            let node = self.grid.node(idx);
            let mut row: Vec<String> = node.iter().map(|x| format!("{x:e}")).collect();
            row.push(format!("{:e}", self.q_norm(v)));
            row.extend(v.iter().take(lead).map(|x| format!("{x:e}")));
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Uniformly sampled backward trajectory of the slow equation; states are the
/// first `m` eigen-coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Backward RK4 on the slow coefficients. The visitor sees, for each time
/// `s_k = -k dt`, the state and the full `F(u(s_k))`.
fn integrate_backward<V>(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    p_bar0: &[f64],
    cfg: &SolverConfig,
    horizon: f64,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(usize, f64, &[f64], &[f64]),
{
    let m = problem.m();
    let n = problem.n();
    let lam = &problem.eigs().eigenvalues()[..m];
    let coords = problem.coords();
    let f = problem.nonlinearity();
    let steps = (horizon / cfg.dt).round() as usize;
    let h = cfg.dt;

    let mut p = coords.slow_of(p_bar0);
    let p0_norm = weighted_norm(&p, lam, problem.alpha());
    let mut u = vec![0.0; n];
    let mut full_f = vec![0.0; n];

    // Slow vector field g(p) = -A p + P F(p + Phi(j p)); also leaves F in `full_f`.
    let field = |p: &[f64], out: &mut [f64], full_f: &mut Vec<f64>, u: &mut Vec<f64>| {
        u[..m].copy_from_slice(p);
        let pb = coords.coords_of(p);
        phi.evaluate_into(&pb, &mut u[m..]);
        *full_f = f.eval(u);
        for i in 0..m {
            out[i] = -lam[i] * p[i] + full_f[i];
        }
    };

    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut k4 = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    let mut scratch_f = vec![0.0; n];
    for k in 0..=steps {
        let s = -(k as f64) * h;
        field(&p, &mut k1, &mut full_f, &mut u);
        visit(k, s, &p, &full_f);
        if k == steps {
            break;
        }
        for i in 0..m {
            tmp[i] = p[i] - 0.5 * h * k1[i];
        }
        field(&tmp, &mut k2, &mut scratch_f, &mut u);
        for i in 0..m {
            tmp[i] = p[i] - 0.5 * h * k2[i];
        }
        field(&tmp, &mut k3, &mut scratch_f, &mut u);
        for i in 0..m {
            tmp[i] = p[i] - h * k3[i];
        }
        field(&tmp, &mut k4, &mut scratch_f, &mut u);
        for i in 0..m {
            p[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let s_next = s - h;
        let norm = weighted_norm(&p, lam, problem.alpha());
        let limit = BLOWUP_FACTOR * problem.growth_bound(p0_norm, s_next);
        if !(norm <= limit) {
            return Err(Error::Blowup {
                time: s_next,
                norm,
                limit,
            });
        }
    }
    Ok(())
}

/// Backward trajectory of the slow equation from `p(0) = j^{-1}(p_bar0)` over
/// `[-T, 0]`.
pub fn slow_flow_backward(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    p_bar0: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let horizon = problem.horizon(cfg);
    let mut times = Vec::new();
    let mut states = Vec::new();
    integrate_backward(problem, phi, p_bar0, cfg, horizon, |_, s, p, _| {
        times.push(s);
        states.push(p.to_vec());
    })?;
    Ok(Trajectory { times, states })
}

/// Weights of `\int_{s-h}^{s} e^{lambda (r - s)} f(r) dr` for piecewise-linear
/// `f`: `(w_a, w_b)` multiply `f(s - h)` and `f(s)`.
pub fn duhamel_weights(lambda: f64, h: f64) -> (f64, f64) {
    let z = lambda * h;
    let w_a = if z < 1e-2 {
        // Series of (1 - e^{-z}(1 + z)) / z.
        let series = z * (0.5 - z * (1.0 / 3.0 - z * (1.0 / 8.0 - z * (1.0 / 30.0 - z * (1.0 / 144.0)))));
        series / lambda
    } else {
        (1.0 - (-z).exp() * (1.0 + z)) / (lambda * z)
    };
    let total = -(-z).exp_m1() / lambda;
    (w_a, total - w_a)
}

/// `(T Phi)(p_bar0)` truncated to `[-T, 0]`, as `N - m` Q coefficients.
pub fn apply_t(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    p_bar0: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let horizon = problem.horizon(cfg);
    apply_t_with(problem, phi, p_bar0, cfg, horizon)
}

fn apply_t_with(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    p_bar0: &[f64],
    cfg: &SolverConfig,
    horizon: f64,
) -> Result<Vec<f64>> {
    let m = problem.m();
    let n = problem.n();
    let lam_next = problem.eigs().lambda(m);
    let tail = tail_bound(problem.nonlinearity().c_f(), lam_next, problem.alpha(), horizon);
    if tail > cfg.tail_tol * (1.0 + 1e-9) {
        return Err(Error::TailBudget {
            tail,
            budget: cfg.tail_tol,
        });
    }
    if problem.nonlinearity().is_zero() {
        return Ok(vec![0.0; n - m]);
    }
    let h = cfg.dt;
    let lam_q = &problem.eigs().eigenvalues()[m..];
    let weights: Vec<(f64, f64)> = lam_q.iter().map(|&l| duhamel_weights(l, h)).collect();
    let decay: Vec<f64> = lam_q.iter().map(|&l| (-l * h).exp()).collect();
    // factor[i] = e^{lambda_i s_k} for the interval ending at s_k.
    let mut factor = vec![1.0; n - m];
    let mut prev_q = vec![0.0; n - m];
    let mut acc = vec![0.0; n - m];
    integrate_backward(problem, phi, p_bar0, cfg, horizon, |k, _, _, f| {
        let fq = &f[m..];
        if k > 0 {
            for i in 0..n - m {
                let (wa, wb) = weights[i];
                acc[i] += factor[i] * (wa * fq[i] + wb * prev_q[i]);
                factor[i] *= decay[i];
            }
        }
        prev_q.copy_from_slice(fq);
    })?;
    Ok(acc)
}

/// One Jacobi sweep `Phi -> T Phi` over all nodes (in parallel).
pub fn sweep(problem: &ManifoldProblem, phi: &ManifoldGraph, cfg: &SolverConfig) -> Result<ManifoldGraph> {
    let grid = phi.grid;
    let r = phi.support_radius;
    let values: Result<Vec<Vec<f64>>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let node = grid.node(idx);
            if phi.coord_norm(&node) > r {
                Ok(vec![0.0; phi.q_dim()])
            } else {
                apply_t(problem, phi, &node, cfg)
            }
        })
        .collect();
    Ok(ManifoldGraph {
        values: values?,
        history: phi.history.clone(),
        ..phi.clone()
    })
}

fn sup_change(a: &ManifoldGraph, b: &ManifoldGraph) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            a.q_norm(&d)
        })
        .fold(0.0, f64::max)
}

/// Fixed point of `T` on `grid`, starting from `Phi = 0`. Refuses to run
/// unless the gap conditions for this operator and `L_F` hold.
pub fn fixed_point(problem: &ManifoldProblem, grid: Grid, cfg: &SolverConfig) -> Result<ManifoldGraph> {
    cfg.validate()?;
    if grid.m != problem.m() {
        return Err(Error::invalid("grid dimension differs from m"));
    }
    estimates::require_gap_conditions(
        problem.eigs(),
        problem.m(),
        problem.nonlinearity().l_f(),
        problem.alpha(),
    )?;
    let mut phi = ManifoldGraph::zeros(problem, grid);
    let mut stalled = 0;
    for _ in 0..cfg.fp_max_iter {
        let next = sweep(problem, &phi, cfg)?;
        let change = sup_change(&next, &phi);
        let previous = phi.history.last().copied();
        phi = next;
        phi.history.push(change);
        if change < cfg.fp_tol {
            return Ok(phi);
        }
        match previous {
            Some(prev) if change >= prev => {
                stalled += 1;
                if stalled >= STALL_LIMIT {
                    return Err(Error::NoContraction {
                        reason: format!(
                            "sup change failed to decrease {STALL_LIMIT} times in a row (history {:?})",
                            phi.history
                        ),
                        context: String::new(),
                    });
                }
            }
            _ => stalled = 0,
        }
    }
    Err(Error::NoContraction {
        reason: format!(
            "no convergence to {:e} in {} sweeps (last change {:e})",
            cfg.fp_tol,
            cfg.fp_max_iter,
            phi.history.last().copied().unwrap_or(f64::NAN)
        ),
        context: String::new(),
    })
}

/// Interpolated value of the graph.
pub fn evaluate_graph(phi: &ManifoldGraph, p_bar: &[f64]) -> Vec<f64> {
    phi.evaluate(p_bar)
}

/// Largest difference quotient `|Phi(a) - Phi(b)|_alpha / |a - b|_alpha` over
/// grid neighbours along axes and diagonals.
pub fn graph_lipschitz(phi: &ManifoldGraph) -> f64 {
    let g = phi.grid;
    let m = phi.m;
    let offsets: Vec<Vec<isize>> = (1..3usize.pow(m as u32))
        .map(|code| {
            let mut c = code;
            (0..m)
                .map(|_| {
                    let d = (c % 3) as isize - 1;
                    c /= 3;
                    d
                })
                .collect::<Vec<isize>>()
        })
        // Keep one of each +/- pair.
        .filter(|o: &Vec<isize>| o.iter().find(|&&d| d != 0).is_some_and(|&d| d > 0))
        .collect();
    let mut best = 0.0_f64;
    for idx in 0..g.len() {
        let base = g.index(idx);
        for off in &offsets {
            let mut other = Vec::with_capacity(m);
            let mut inside = true;
            for d in 0..m {
                let k = base[d] as isize + off[d];
                if k < 0 || k >= g.per_axis as isize {
                    inside = false;
                    break;
                }
                other.push(k as usize);
            }
            if !inside {
                continue;
            }
            let a = &phi.values[idx];
            let b = &phi.values[g.flat(&other)];
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let num = phi.q_norm(&diff);
            if num == 0.0 {
                continue;
            }
            let dp: Vec<f64> = off.iter().map(|&o| o as f64 * g.h).collect();
            best = best.max(num / phi.coord_norm(&dp));
        }
    }
    best
}

/// Forward integrator of the full system `u' = -A u + F(u)`: fourth-order
/// Runge-Kutta in the integrating-factor (Lawson) form, exact on the linear part.
#[derive(Debug)]
struct Lawson<'a> {
    f: &'a NonlinearitySpec,
    h: f64,
    half: Vec<f64>,
    full: Vec<f64>,
}

impl<'a> Lawson<'a> {
    fn new(eigs: &EigenData, f: &'a NonlinearitySpec, h: f64) -> Self {
        Self {
            f,
            h,
            half: eigs.eigenvalues().iter().map(|l| (-l * h / 2.0).exp()).collect(),
            full: eigs.eigenvalues().iter().map(|l| (-l * h).exp()).collect(),
        }
    }

    fn step(&self, u: &mut [f64]) {
        let h = self.h;
        let n = u.len();
        let k1 = self.f.eval(u);
        let a: Vec<f64> = (0..n).map(|i| self.half[i] * (u[i] + 0.5 * h * k1[i])).collect();
        let k2 = self.f.eval(&a);
        let b: Vec<f64> = (0..n).map(|i| self.half[i] * u[i] + 0.5 * h * k2[i]).collect();
        let k3 = self.f.eval(&b);
        let c: Vec<f64> = (0..n)
            .map(|i| self.full[i] * u[i] + h * self.half[i] * k3[i])
            .collect();
        let k4 = self.f.eval(&c);
        for i in 0..n {
            u[i] = self.full[i] * u[i]
                + h / 6.0 * (self.full[i] * k1[i] + 2.0 * self.half[i] * (k2[i] + k3[i]) + k4[i]);
        }
    }
}

/// `|Q u - Phi(j(P u))|_alpha`.
pub fn distance_to_graph(problem: &ManifoldProblem, phi: &ManifoldGraph, u: &[f64]) -> f64 {
    let m = problem.m();
    let pb = problem.coords().coords_of(&u[..m]);
    let g = phi.evaluate(&pb);
    let d: Vec<f64> = u[m..].iter().zip(&g).map(|(a, b)| a - b).collect();
    problem.q_norm(&d)
}

/// Point `j^{-1}(p_bar) + Phi(p_bar)` on the graph.
pub fn lift(problem: &ManifoldProblem, phi: &ManifoldGraph, p_bar: &[f64]) -> Vec<f64> {
    let mut u = problem.coords().from_coords(p_bar).0;
    let m = problem.m();
    u[m..].copy_from_slice(&phi.evaluate(p_bar));
    u
}

fn forward_distances(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    u0: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(Error::invalid("horizon and dt must be positive"));
    }
    if u0.len() != problem.n() {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    let stepper = Lawson::new(problem.eigs(), problem.nonlinearity(), dt);
    let steps = (horizon / dt).round() as usize;
    let mut u = u0.to_vec();
    let start = weighted_norm(&u, problem.eigs().eigenvalues(), problem.alpha());
    let bound = BLOWUP_FACTOR * (start + problem.support_radius() + problem.nonlinearity().c_f());
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, distance_to_graph(problem, phi, &u)));
    for k in 1..=steps {
        stepper.step(&mut u);
        let norm = weighted_norm(&u, problem.eigs().eigenvalues(), problem.alpha());
        if !(norm <= bound) {
            return Err(Error::Blowup {
                time: k as f64 * dt,
                norm,
                limit: bound,
            });
        }
        out.push((k as f64 * dt, distance_to_graph(problem, phi, &u)));
    }
    Ok(out)
}

/// Sup over the forward trajectory from `u0` of the distance to the graph.
pub fn invariance_residual(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    u0_on_manifold: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<f64> {
    Ok(forward_distances(problem, phi, u0_on_manifold, horizon, dt)?
        .iter()
        .map(|&(_, d)| d)
        .fold(0.0, f64::max))
}

/// Least-squares slope of `ln(distance to graph)` against time over the
/// samples with distance above `1e-10`; `NaN` when fewer than three remain.
pub fn attraction_rate(
    problem: &ManifoldProblem,
    phi: &ManifoldGraph,
    u0_off: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<f64> {
    let samples: Vec<(f64, f64)> = forward_distances(problem, phi, u0_off, horizon, dt)?
        .into_iter()
        .filter(|&(_, d)| d > 1e-10)
        .map(|(t, d)| (t, d.ln()))
        .collect();
    if samples.len() < 3 {
        return Ok(f64::NAN);
    }
    Ok(least_squares(&samples).0)
}

/// `(slope, intercept, rms residual)` of a straight-line fit.
pub(crate) fn least_squares(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, intercept, rms)
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// The terms of the invariance error budget for a converged graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub tail: f64,
    pub fixed_point: f64,
    pub quadrature: f64,
    pub interpolation: f64,
}

impl ErrorBudget {
    /// Allowed residual: twice the sum of the terms.
    pub fn total(&self) -> f64 {
        2.0 * (self.tail + self.fixed_point + self.quadrature + self.interpolation)
    }
}

/// Error budget of a converged graph: the truncation tail, the fixed-point
/// tolerance, a Richardson estimate of the time-stepping error (`dt` against
/// `dt/2` on a sample of nodes), and the interpolation error measured at cell
/// midpoints against `T Phi`.
pub fn error_budget(problem: &ManifoldProblem, phi: &ManifoldGraph, cfg: &SolverConfig) -> Result<ErrorBudget> {
    let horizon = problem.horizon(cfg);
    let tail = tail_bound(
        problem.nonlinearity().c_f(),
        problem.eigs().lambda(problem.m()),
        problem.alpha(),
        horizon,
    );
    let g = phi.grid;
    let r = phi.support_radius;
    let stride = (g.len() / 12).max(1);
    let sample: Vec<usize> = (0..g.len())
        .step_by(stride)
        .filter(|&i| phi.coord_norm(&g.node(i)) <= r)
        .collect();
    let fine = SolverConfig {
        dt: cfg.dt / 2.0,
        t_trunc: Some(horizon),
        ..*cfg
    };
    let quadrature = sample
        .par_iter()
        .map(|&i| -> Result<f64> {
            let node = g.node(i);
            let a = apply_t_with(problem, phi, &node, cfg, horizon)?;
            let b = apply_t_with(problem, phi, &node, &fine, horizon)?;
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            Ok(problem.q_norm(&d) * 16.0 / 15.0)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mids: Vec<Vec<f64>> = (0..g.len())
        .filter_map(|i| {
            let base = g.index(i);
            if base.iter().any(|&k| k + 1 >= g.per_axis) {
                return None;
            }
            let p: Vec<f64> = base.iter().map(|&k| g.axis_value(k) + 0.5 * g.h).collect();
            (phi.coord_norm(&p) <= r).then_some(p)
        })
        .collect();
    let interpolation = mids
        .par_iter()
        .map(|p| -> Result<f64> {
            let t = apply_t_with(problem, phi, p, cfg, horizon)?;
            let v = phi.evaluate(p);
            let d: Vec<f64> = t.iter().zip(&v).map(|(x, y)| x - y).collect();
            Ok(problem.q_norm(&d))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(ErrorBudget {
        tail,
        fixed_point: cfg.fp_tol,
        quadrature,
        interpolation,
    })
}
