//! Acceptance suite: thirteen end-to-end criteria, one PASS/FAIL line each.
//! Runs as a plain binary so the lines are always printed; exits non-zero if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use manifold_gap::harness::{
    make_family, run_sweep, verify_builtin, FamilyKind, FamilyParams, NonlinearityChoice,
    ProblemSpec, SweepOptions, DEFAULT_EPS, VERIFY_EPS,
};
use manifold_gap::linalg;
use manifold_gap::manifold::{
    attraction_rate, error_budget, fixed_point, graph_lipschitz, invariance_residual, lift,
    Grid, ManifoldGraph, ManifoldProblem, SolverConfig,
};
use manifold_gap::nonlinearity::{DecoupledParams, NonlinearitySpec};
use manifold_gap::spectral::{contour_projection, direct_projection, ComparisonPair, Contour, EigenData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn quadratic(n: usize) -> Arc<EigenData> {
    Arc::new(EigenData::diagonal((1..=n).map(|i| (i * i) as f64).collect()).unwrap())
}

fn tanh_spec(m: usize) -> ProblemSpec {
    ProblemSpec {
        m,
        ..ProblemSpec::default_sweep()
    }
}

fn build(problem: &ManifoldProblem, cfg: &SolverConfig) -> Result<ManifoldGraph, String> {
    let grid = cfg.grid(problem.m(), problem.support_radius()).map_err(|e| e.to_string())?;
    fixed_point(problem, grid, cfg).map_err(|e| e.to_string())
}

fn family(kind: FamilyKind, m: usize) -> manifold_gap::harness::PerturbationFamily {
    let (eigs, f) = tanh_spec(m).build().unwrap();
    make_family(kind, &FamilyParams::default(), eigs, f, m).unwrap()
}

fn c1_zero_perturbation() -> Outcome {
    let mut worst = 0.0_f64;
    for kind in [
        FamilyKind::EigenShift,
        FamilyKind::Rotation,
        FamilyKind::ForcingShift,
        FamilyKind::Combined,
    ] {
        let report = run_sweep(&family(kind, 1), &[0.0], &SolverConfig::default(), &SweepOptions::default())
            .map_err(|e| e.to_string())?;
        let r = &report.records[0];
        ensure(r.dist == 0.0 && r.tau == 0.0 && r.rho == 0.0, || {
            format!("{kind:?}: d = {:e}, tau = {:e}, rho = {:e}", r.dist, r.tau, r.rho)
        })?;
        worst = worst.max(r.dist.max(r.tau).max(r.rho));
    }
    Ok(format!("four families at eps = 0: d = tau = rho = {worst}"))
}

fn c2_linear_oracle() -> Outcome {
    let mut detail = Vec::new();
    for m in [1usize, 2] {
        let eigs = quadratic(64);
        let f = NonlinearitySpec::zero(&eigs, 0.5);
        let problem = ManifoldProblem::new(eigs, m, &ComparisonPair::identity(64), f, 0.5).unwrap();
        let cfg = SolverConfig {
            grid_extent: Some(1.25),
            grid_h: Some(0.0625),
            ..SolverConfig::default()
        };
        let phi = build(&problem, &cfg)?;
        ensure(phi.history.len() == 1, || format!("m = {m}: {} iterations", phi.history.len()))?;
        ensure(phi.sup_norm() <= 1e-14, || format!("m = {m}: sup {:e}", phi.sup_norm()))?;
        detail.push(format!("m = {m}: 1 iteration, sup {:e}", phi.sup_norm()));
    }
    Ok(detail.join("; "))
}

fn c3_constant_forcing() -> Outcome {
    let cfg = SolverConfig {
        grid_extent: Some(1.0),
        grid_h: Some(0.125),
        ..SolverConfig::default()
    };
    let mut worst = 0.0_f64;
    for m in [1usize, 2] {
        let eigs = quadratic(64);
        let q: Vec<f64> = (0..64).map(|i| if i < m { 0.0 } else { 1.0 / (i + 1) as f64 }).collect();
        let f = NonlinearitySpec::constant(&eigs, 0.5, q.clone(), 1e6).unwrap();
        let problem = ManifoldProblem::new(eigs.clone(), m, &ComparisonPair::identity(64), f, 0.5).unwrap();
        let phi = build(&problem, &cfg)?;
        for (idx, v) in phi.values.iter().enumerate() {
            let d: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(k, x)| x - q[k + m] / eigs.lambda(k + m))
                .collect();
            let err = problem.q_norm(&d);
            worst = worst.max(err);
            ensure(err <= cfg.fp_tol + cfg.tail_tol, || {
                format!("m = {m}, node {idx}: error {err:e}")
            })?;
        }
    }
    Ok(format!(
        "max alpha-norm error {worst:.3e} <= {:.1e}",
        cfg.fp_tol + cfg.tail_tol
    ))
}

/// Backward RK4 of the slow equation and Simpson quadrature of the fast
/// Duhamel integral, evaluated with the Q coordinates held at zero.
fn decoupled_oracle(f: &NonlinearitySpec, eigs: &EigenData, m: usize, p_bar: &[f64]) -> Vec<f64> {
    let n = eigs.len();
    let h = 1e-4;
    let steps = 100_000; // s in [-10, 0]
    let rhs = |p: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; n];
        u[..m].copy_from_slice(p);
        let fu = f.eval(&u);
        (0..m).map(|i| -eigs.lambda(i) * p[i] + fu[i]).collect()
    };
    let fast = |p: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; n];
        u[..m].copy_from_slice(p);
        f.eval(&u)[m..].to_vec()
    };
    let mut p = p_bar.to_vec();
    let mut acc = vec![0.0; n - m];
    let add = |acc: &mut Vec<f64>, s: f64, w: f64, fq: &[f64]| {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += w * (eigs.lambda(k + m) * s).exp() * fq[k];
        }
    };
    add(&mut acc, 0.0, 1.0, &fast(&p));
    for k in 1..=steps {
        // One RK4 step of size -h.
        let k1 = rhs(&p);
        let y2: Vec<f64> = p.iter().zip(&k1).map(|(y, d)| y - 0.5 * h * d).collect();
        let k2 = rhs(&y2);
        let y3: Vec<f64> = p.iter().zip(&k2).map(|(y, d)| y - 0.5 * h * d).collect();
        let k3 = rhs(&y3);
        let y4: Vec<f64> = p.iter().zip(&k3).map(|(y, d)| y - h * d).collect();
        let k4 = rhs(&y4);
        for i in 0..m {
            p[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let w = if k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        add(&mut acc, -(k as f64) * h, w, &fast(&p));
    }
    acc.iter().map(|a| a * h / 3.0).collect()
}

fn c4_decoupled_oracle() -> Outcome {
    let eigs = quadratic(64);
    let m = 1;
    let f = NonlinearitySpec::decoupled(
        &eigs,
        0.5,
        m,
        DecoupledParams {
            amp: 0.002,
            decay: 0.5,
            weight: 1.0,
            radius: 4.0,
        },
    )
    .map_err(|e| e.to_string())?;
    let problem = ManifoldProblem::new(eigs.clone(), m, &ComparisonPair::identity(64), f.clone(), 0.5).unwrap();
    let phi = build(&problem, &SolverConfig::default())?;
    let mut worst = 0.0_f64;
    let mut scale = 0.0_f64;
    for idx in 0..phi.grid.len() {
        let node = phi.grid.node(idx);
        let oracle = if problem.coord_norm(&node) > phi.support_radius {
            vec![0.0; 64 - m]
        } else {
            decoupled_oracle(&f, &eigs, m, &node)
        };
        let d: Vec<f64> = phi.values[idx].iter().zip(&oracle).map(|(a, b)| a - b).collect();
        worst = worst.max(problem.q_norm(&d));
        scale = scale.max(problem.q_norm(&oracle));
    }
    ensure(worst <= 1e-6, || format!("max node error {worst:e}"))?;
    ensure(scale > 1e-5, || format!("oracle graph is trivially small ({scale:e})"))?;
    Ok(format!(
        "{} nodes, max error {worst:.3e} (graph size {scale:.3e})",
        phi.grid.len()
    ))
}

fn c5_verifier_suite() -> Outcome {
    let reports = verify_builtin("all").map_err(|e| e.to_string())?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({} violations, worst {:.3})", r.lemma, r.violations, r.worst_ratio))
        .collect();
    ensure(failed.is_empty(), || format!("violations in {}", failed.join(", ")))?;
    let summary: Vec<String> = reports
        .iter()
        .map(|r| format!("{}:{:.3}", r.lemma, r.worst_ratio))
        .collect();
    Ok(format!(
        "{} lemmas, 0 violations at eps in {VERIFY_EPS:?}; worst ratios {}",
        reports.len(),
        summary.join(" ")
    ))
}

/// Fixed-point runs accepted under the gap conditions.
fn accepted_runs() -> Result<Vec<(String, ManifoldProblem, ManifoldGraph)>, String> {
    let cfg = SolverConfig::default();
    let mut out = Vec::new();
    for m in [1usize, 2] {
        let problem = tanh_spec(m).problem().map_err(|e| e.to_string())?;
        let phi = build(&problem, &cfg)?;
        out.push((format!("tanh m={m}"), problem, phi));
    }
    for kind in [FamilyKind::EigenShift, FamilyKind::Rotation, FamilyKind::ForcingShift] {
        let fam = family(kind, 1);
        let mb = fam.member(0.1).map_err(|e| e.to_string())?;
        let problem = ManifoldProblem::new(mb.eigs.clone(), 1, &mb.pair, mb.f.clone(), 0.5).map_err(|e| e.to_string())?;
        let phi = build(&problem, &cfg)?;
        out.push((format!("{} eps=0.1", fam.name), problem, phi));
    }
    let decoupled = ProblemSpec {
        nonlinearity: NonlinearityChoice::Decoupled(DecoupledParams {
            amp: 0.002,
            decay: 0.5,
            weight: 1.0,
            radius: 4.0,
        }),
        ..tanh_spec(1)
    };
    let problem = decoupled.problem().map_err(|e| e.to_string())?;
    let phi = build(&problem, &cfg)?;
    out.push(("decoupled m=1".to_string(), problem, phi));
    Ok(out)
}

fn c6_contraction() -> Outcome {
    let mut medians = Vec::new();
    for (name, _, phi) in accepted_runs()? {
        let ratios = phi.contraction_ratios();
        ensure(!ratios.is_empty(), || format!("{name}: no ratios"))?;
        ensure(ratios.iter().all(|&r| r < 1.0), || format!("{name}: ratios {ratios:?}"))?;
        medians.push(format!("{name}: {:.3e}", phi.median_ratio().unwrap()));
    }
    Ok(format!("all ratios < 1; median ratio {}", medians.join(", ")))
}

fn c7_regularity() -> Outcome {
    let mut parts = Vec::new();
    for (name, _, phi) in accepted_runs()? {
        let lip = graph_lipschitz(&phi);
        ensure(lip < 1.0, || format!("{name}: Lipschitz {lip}"))?;
        parts.push(format!("{name}: {lip:.3e}"));
    }
    for m in [1usize, 2] {
        let problem = tanh_spec(m).problem().map_err(|e| e.to_string())?;
        let r = problem.support_radius();
        let lip_at = |h: f64| -> Result<f64, String> {
            let cfg = SolverConfig {
                grid_h: Some(h),
                ..SolverConfig::default()
            };
            Ok(graph_lipschitz(&build(&problem, &cfg)?))
        };
        let coarse = lip_at(r / 8.0)?;
        let fine = lip_at(r / 16.0)?;
        let change = (coarse - fine).abs() / fine;
        ensure(change <= 0.1, || format!("m = {m}: Lipschitz {coarse:e} -> {fine:e}"))?;
        parts.push(format!("m={m} h->h/2 change {:.2}%", 100.0 * change));
    }
    Ok(parts.join("; "))
}

fn c8_invariance() -> Outcome {
    let cfg = SolverConfig::default();
    let problem = tanh_spec(1).problem().map_err(|e| e.to_string())?;
    let phi = build(&problem, &cfg)?;
    let budget = error_budget(&problem, &phi, &cfg).map_err(|e| e.to_string())?;
    let r = problem.support_radius();
    let mut worst = 0.0_f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..problem.m()).map(|_| rng.random_range(-0.5 * r..0.5 * r)).collect();
        let u0 = lift(&problem, &phi, &p);
        let res = invariance_residual(&problem, &phi, &u0, 2.0, 1e-3).map_err(|e| e.to_string())?;
        worst = worst.max(res);
    }
    ensure(worst <= budget.total(), || {
        format!("residual {worst:e} > budget {:e} ({budget:?})", budget.total())
    })?;
    Ok(format!(
        "max residual {worst:.3e} <= budget {:.3e} (tail {:.2e}, fixed point {:.2e}, quadrature {:.2e}, interpolation {:.2e})",
        budget.total(),
        budget.tail,
        budget.fixed_point,
        budget.quadrature,
        budget.interpolation
    ))
}

fn c9_attraction() -> Outcome {
    let eigs = quadratic(64);
    let zero = ManifoldProblem::new(
        eigs.clone(),
        1,
        &ComparisonPair::identity(64),
        NonlinearitySpec::zero(&eigs, 0.5),
        0.5,
    )
    .unwrap();
    let phi0 = ManifoldGraph::zeros(&zero, Grid::new(1, 1.25, 0.0625).unwrap());
    let mut u = lift(&zero, &phi0, &[0.5]);
    u[1] = 0.1;
    let linear = attraction_rate(&zero, &phi0, &u, 4.0, 1e-2).map_err(|e| e.to_string())?;
    let target = -eigs.lambda(1);
    ensure((linear - target).abs() <= 0.01 * target.abs(), || {
        format!("linear rate {linear} vs {target}")
    })?;

    let problem = tanh_spec(1).problem().map_err(|e| e.to_string())?;
    let phi = build(&problem, &SolverConfig::default())?;
    let mut u = lift(&problem, &phi, &[0.8]);
    u[1] += 0.2;
    u[2] -= 0.1;
    u[5] += 0.05;
    let coupled = attraction_rate(&problem, &phi, &u, 3.0, 1e-3).map_err(|e| e.to_string())?;
    ensure(coupled <= 0.5 * target, || format!("coupled rate {coupled} > {}", 0.5 * target))?;
    Ok(format!(
        "F = 0 rate {linear:.4} (target {target}); coupled rate {coupled:.4} <= {}",
        0.5 * target
    ))
}

fn sweep_cfg() -> SolverConfig {
    SolverConfig {
        fp_tol: 1e-11,
        ..SolverConfig::default()
    }
}

fn c10_eigen_shift_rate() -> Outcome {
    let fam = family(FamilyKind::EigenShift, 1);
    let report = run_sweep(&fam, &DEFAULT_EPS, &sweep_cfg(), &SweepOptions::default()).map_err(|e| e.to_string())?;
    let fit = report.fit.ok_or("no rate fit")?;
    let (max, med) = (report.max_ratio(), report.median_ratio().unwrap());
    let slope = fit.eps.slope;
    ensure(report.records.iter().all(|r| r.rho == 0.0), || "rho not zero".into())?;
    ensure(max <= 10.0 * med, || format!("max ratio {max:e} > 10 x median {med:e}"))?;
    ensure((0.85..=1.15).contains(&slope), || format!("slope {slope}"))?;
    Ok(format!(
        "slope {slope:.4}, ratio d/B max {max:.3e} median {med:.3e}, d-vs-B slope {:.4}",
        fit.bound.map(|b| b.slope).unwrap_or(f64::NAN)
    ))
}

fn c11_forcing_shift_rate() -> Outcome {
    let fam = family(FamilyKind::ForcingShift, 1);
    let report = run_sweep(&fam, &DEFAULT_EPS, &sweep_cfg(), &SweepOptions::default()).map_err(|e| e.to_string())?;
    let fit = report.fit.ok_or("no rate fit")?;
    let (max, med) = (report.max_ratio(), report.median_ratio().unwrap());
    let slope = fit.eps.slope;
    ensure(report.records.iter().all(|r| r.tau == 0.0), || "tau not zero".into())?;
    ensure(max <= 2.0 * med, || format!("max ratio {max:e} > 2 x median {med:e}"))?;
    ensure((0.9..=1.1).contains(&slope), || format!("slope {slope}"))?;
    Ok(format!("slope {slope:.4}, ratio d/rho max {max:.4} median {med:.4}"))
}

fn c12_contour_projection() -> Outcome {
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for m in [1usize, 2] {
        for kind in [FamilyKind::EigenShift, FamilyKind::Rotation, FamilyKind::Combined] {
            let fam = family(kind, m);
            let rect = Contour::slow_rectangle(fam.base_eigs(), m, 256);
            for eps in std::iter::once(0.0).chain(DEFAULT_EPS) {
                let mb = fam.member(eps).map_err(|e| e.to_string())?;
                let proj = contour_projection(&mb.eigs, &rect).map_err(|e| e.to_string())?;
                let err = linalg::op_norm(&(&proj - direct_projection(&mb.eigs, m)));
                let rank = linalg::numerical_rank(&proj, 1e-6);
                ensure(err <= 1e-8, || format!("{kind:?} m={m} eps={eps}: error {err:e}"))?;
                ensure(rank == m, || format!("{kind:?} m={m} eps={eps}: rank {rank}"))?;
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, max |P_contour - P_m| = {worst:.3e}, rank = m throughout"))
}

fn c13_determinism() -> Outcome {
    let cfg = SolverConfig::default();
    let problem = tanh_spec(2).problem().map_err(|e| e.to_string())?;
    let graph_files = |threads: usize| -> Result<(String, String), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let phi = pool.install(|| build(&problem, &cfg))?;
        Ok((phi.to_json().map_err(|e| e.to_string())?, phi.to_csv()))
    };
    let a = graph_files(1)?;
    let b = graph_files(4)?;
    ensure(a == b, || "graph artifacts differ between runs".into())?;

    let fam = family(FamilyKind::Combined, 1);
    let sweep = || -> Result<(String, String), String> {
        let r = run_sweep(&fam, &[1e-1, 1e-2, 0.0], &cfg, &SweepOptions { seed: 7, ..SweepOptions::default() })
            .map_err(|e| e.to_string())?;
        Ok((r.to_json().map_err(|e| e.to_string())?, r.to_csv()))
    };
    let s1 = sweep()?;
    let s2 = sweep()?;
    ensure(s1 == s2, || "sweep artifacts differ between runs".into())?;
    Ok(format!(
        "graph JSON/CSV identical on 1 and 4 threads ({} bytes); sweep JSON/CSV identical ({} bytes)",
        a.0.len(),
        s1.0.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("zero-perturbation identity", c1_zero_perturbation),
        ("linear oracle", c2_linear_oracle),
        ("constant-forcing oracle", c3_constant_forcing),
        ("decoupled oracle", c4_decoupled_oracle),
        ("lemma verifier suite", c5_verifier_suite),
        ("contraction", c6_contraction),
        ("graph regularity", c7_regularity),
        ("invariance", c8_invariance),
        ("attraction", c9_attraction),
        ("distance rate, eigenvalue axis", c10_eigen_shift_rate),
        ("distance rate, forcing axis", c11_forcing_shift_rate),
        ("contour vs direct projection", c12_contour_projection),
        ("determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = (k + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
