//! `manifold-gap`: batch front end for gap scans, manifold construction,
//! distance sweeps and the lemma verifiers.
//!
//! Exit codes: 0 success, 1 mathematical failure, 2 usage or configuration error.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use manifold_gap::estimates::{gap_check, GapReport};
use manifold_gap::harness::{self, make_family, run_sweep, SweepOptions};
use manifold_gap::manifold::{fixed_point, graph_lipschitz};
use manifold_gap::Error;

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "manifold-gap", version, about = "Inertial-manifold distance laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`); must exist.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan the slow dimension m against the gap conditions.
    GapCheck,
    /// Build the inertial manifold of the unperturbed problem.
    Build,
    /// Sweep the perturbation parameter and fit the distance rate.
    Sweep,
    /// Run the numerical lemma checks on the built-in families.
    Verify {
        /// Lemma id (e.g. 3.9) or `all`.
        #[arg(long, default_value = "all")]
        lemma: String,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Math(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Math(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Schema { .. } | Error::Io { .. } | Error::Json(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Math(e.to_string()),
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MANIFOLD_GAP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("MANIFOLD_GAP_THREADS = {raw:?} is not a non-negative integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure worker threads: {e}")))
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

fn load(cli: &Cli) -> Result<Context, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    if !out.is_dir() {
        return Err(CliError::Usage(format!(
            "output directory {} does not exist",
            out.display()
        )));
    }
    Ok(Context { cfg, out })
}

fn gap_table(report: &GapReport) -> String {
    let mut s = format!(
        "{:>4} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}  ok\n",
        "m", "gap_base", "power_base", "power_eps", "gap_eps", "sep_eps", "sep_base"
    );
    for g in report.margins.iter().filter(|g| g.m <= 12 || g.admissible()) {
        let _ = writeln!(
            s,
            "{:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.3} {:>10.3}  {}",
            g.m,
            g.gap_base,
            g.power_base,
            g.power_eps,
            g.gap_eps,
            g.separation_eps,
            g.separation_base,
            if g.admissible() { "yes" } else { "no" }
        );
    }
    s
}

/// Slow dimension: the configured one or the smallest admissible for the certified `L_F`.
fn resolve_m(cfg: &RunConfig) -> Result<usize, CliError> {
    if let Some(m) = cfg.m {
        return Ok(m);
    }
    if matches!(cfg.nonlinearity, harness::NonlinearityChoice::Decoupled(_)) {
        return Err(CliError::Usage(
            "config error at `m`: the decoupled nonlinearity needs an explicit m".into(),
        ));
    }
    let (eigs, f) = cfg.problem_spec(1).build()?;
    let l_f = cfg.l_f.unwrap_or(f.l_f());
    gap_check(&eigs, &eigs, l_f, cfg.alpha)
        .chosen
        .ok_or_else(|| CliError::Math(format!("no slow dimension satisfies the gap conditions for L_F = {l_f:.6e}")))
}

fn cmd_gap_check(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let m = cfg.m.unwrap_or(1);
    let (eigs, f) = cfg.problem_spec(m).build()?;
    let l_f = cfg.l_f.unwrap_or(f.l_f());
    let report = gap_check(&eigs, &eigs, l_f, cfg.alpha);
    print!("L_F = {l_f:.6e}, alpha = {}\n{}", cfg.alpha, gap_table(&report));
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&ctx.out, "gap-report.json", &json)?;
    match report.chosen {
        Some(m) => {
            println!("admissible m: {:?}; chosen m = {m}", report.admissible);
            Ok(())
        }
        None => Err(CliError::Math("no admissible m".into())),
    }
}

fn cmd_build(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let m = resolve_m(cfg)?;
    let problem = cfg.problem_spec(m).problem()?;
    let grid = cfg.solver.grid(m, problem.support_radius())?;
    let phi = fixed_point(&problem, grid, &cfg.solver)?;
    for (k, d) in phi.history.iter().enumerate() {
        println!("iteration {:>3}: sup change {d:.6e}", k + 1);
    }
    let mut history = String::from("iteration,sup_change\n");
    for (k, d) in phi.history.iter().enumerate() {
        let _ = writeln!(history, "{},{d:e}", k + 1);
    }
    write_file(&ctx.out, "manifold.json", &phi.to_json()?)?;
    write_file(&ctx.out, "manifold.csv", &phi.to_csv())?;
    write_file(&ctx.out, "history.csv", &history)?;
    println!(
        "m = {m}, {} nodes, sup |Phi| = {:.6e}, Lipschitz {:.4e}, median contraction {}",
        grid.len(),
        phi.sup_norm(),
        graph_lipschitz(&phi),
        phi.median_ratio().map_or("n/a".to_string(), |r| format!("{r:.4e}"))
    );
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let m = resolve_m(cfg)?;
    let (eigs, f) = cfg.problem_spec(m).build()?;
    let family = make_family(cfg.family.kind, &cfg.family.params, eigs, f, m)?;
    let options = SweepOptions {
        l_f_budget: cfg.l_f,
        seed: cfg.seed,
        ..SweepOptions::default()
    };
    let report = run_sweep(&family, &cfg.eps, &cfg.solver, &options)?;
    harness::write_report(&report, &ctx.out.join("sweep.json"))?;
    print!("family {}, m = {m}\n{}", family.name, report.table());
    match report.fit {
        Some(fit) => {
            print!("slope log d vs log eps: {:.4}", fit.eps.slope);
            match fit.bound {
                Some(b) => println!(", log d vs log B: {:.4}", b.slope),
                None => println!(),
            }
            println!(
                "ratio d/B: max {:.4e}, median {:.4e}",
                report.max_ratio(),
                report.median_ratio().unwrap_or(f64::NAN)
            );
        }
        None => println!("slope: n/a (fewer than three records with eps > 0 and d > 0)"),
    }
    Ok(())
}

fn cmd_verify(ctx: &Context, lemma: &str) -> Result<(), CliError> {
    let reports = harness::verify_builtin(lemma)?;
    println!("{:<6} {:>12} {:>10} {:>8}", "lemma", "worst ratio", "violations", "samples");
    for r in &reports {
        println!(
            "{:<6} {:>12.4e} {:>10} {:>8}",
            r.lemma, r.worst_ratio, r.violations, r.samples
        );
    }
    let json = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
    write_file(&ctx.out, "verify.json", &json)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Math(format!("{failed} lemma checks reported violations")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let ctx = load(cli)?;
    match &cli.command {
        Command::GapCheck => cmd_gap_check(&ctx),
        Command::Build => cmd_build(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Verify { lemma } => cmd_verify(&ctx, lemma),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
