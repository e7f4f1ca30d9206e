//! Batch front end: config ingestion, solver/coverage runs, and the
//! discontinuity demos, all emitting deterministic plot-ready CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use matchprior::config::RunConfig;
use matchprior::coverage::{z_map, CoverageReport};
use matchprior::credible::{
    credible_ball, hpd_region, perturbed_region, relaxed_ball, BaseKind, CredibleFamily,
    RegionConfig, RegionFamily, RegionKind,
};
use matchprior::error::Error;
use matchprior::matching::{solve_matching, SolveResult};
use matchprior::measure::{DensityField, DiscreteMeasure, GridMeasure, ParameterGrid};
use matchprior::model::Model;

#[derive(Parser)]
#[command(name = "matchprior", version, about = "Matching-prior synthesis and coverage tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the damped fixed-point solver and write prior/coverage/trace CSVs.
    Solve(RunArgs),
    /// Evaluate coverage and z for the configured prior without solving.
    Coverage(RunArgs),
    /// Emit the acceptance field for one (prior, x) pair.
    Region(RegionArgs),
    /// Plot-ready demonstrations of region (dis)continuity.
    Demo(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV and summary artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the credibility level alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the schedule knob a (drives eta, delta, gamma, beta).
    #[arg(long)]
    a: Option<f64>,
    /// Override the solver stopping tolerance on max z.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Override the damping factor in (0, 1].
    #[arg(long)]
    damping: Option<f64>,
    /// Override the restart seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RegionArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Sample-space index of the observation.
    #[arg(long)]
    x: Option<usize>,
}

#[derive(Args)]
struct DemoArgs {
    #[command(subcommand)]
    which: DemoKind,
}

#[derive(Subcommand)]
enum DemoKind {
    /// Credible-ball radius across the two-bump mixture family.
    BallJump {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        c_min: f64,
        #[arg(long, default_value_t = 0.7)]
        c_max: f64,
        #[arg(long, default_value_t = 0.01)]
        c_step: f64,
    },
    /// HPD indicator flip between two near-uniform sine densities.
    HpdFlip {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        c: f64,
        #[arg(long, default_value_t = 60)]
        cells: usize,
    },
    /// Ball, relaxed-ball and perturbed-ball fields for a flat posterior.
    Figure1 {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 17 significant digits: every run with the same config is byte-identical.
fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(alpha) = args.alpha {
        cfg.region.alpha = alpha;
    }
    if let Some(a) = args.a {
        cfg.solver.schedule_a = Some(a);
    }
    if let Some(tol) = args.tol {
        cfg.solver.tol = tol;
    }
    if let Some(n) = args.max_iters {
        cfg.solver.max_iters = n;
    }
    if let Some(d) = args.damping {
        cfg.solver.damping = d;
    }
    if let Some(s) = args.seed {
        cfg.solver.seed = s;
    }
}

fn out_dir(cfg: &RunConfig, args_out: &Option<PathBuf>) -> Result<PathBuf, Error> {
    let dir = args_out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn coverage_csv(grid: &ParameterGrid, report: &CoverageReport) -> String {
    let mut s = String::from("theta,coverage,z\n");
    for (i, &t) in grid.points().iter().enumerate() {
        s.push_str(&format!(
            "{},{},{}\n",
            fmt(t),
            fmt(report.coverage[i]),
            fmt(report.z[i])
        ));
    }
    s
}

fn prior_csv(prior: &DiscreteMeasure) -> String {
    let mut s = String::from("theta,mass\n");
    for (t, m) in prior.grid().points().iter().zip(prior.mass()) {
        s.push_str(&format!("{},{}\n", fmt(*t), fmt(*m)));
    }
    s
}

fn trace_csv(result: &SolveResult) -> String {
    let mut s = String::from("iter,max_z,w1_step\n");
    for row in &result.trace {
        s.push_str(&format!("{},{},{}\n", row.iter, fmt(row.max_z), fmt(row.w1_step)));
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    converged: bool,
    max_z: f64,
    iters: usize,
    params: SummaryParams<'a>,
    seed: u64,
}

#[derive(Serialize)]
struct SummaryParams<'a> {
    kind: &'a str,
    alpha: f64,
    beta: f64,
    delta: f64,
    eta: f64,
    gamma: f64,
    n_z: usize,
    bisect_tol: f64,
    posterior_map_c: f64,
    damping: f64,
    tol: f64,
    max_iters: usize,
    restarts_used: usize,
}

fn kind_name(kind: RegionKind) -> &'static str {
    match kind {
        RegionKind::Ball => "ball",
        RegionKind::Hpd => "hpd",
        RegionKind::RelaxedBall => "relaxed-ball",
        RegionKind::RelaxedHpd => "relaxed-hpd",
        RegionKind::PerturbedBall => "perturbed-ball",
        RegionKind::PerturbedHpd => "perturbed-hpd",
    }
}

struct Prepared {
    model: Arc<Model>,
    region: RegionConfig,
    family: RegionFamily,
    run: RunConfig,
}

fn prepare(cfg: RunConfig) -> Result<Prepared, Error> {
    let model = Arc::new(cfg.build_model()?);
    let region = cfg.build_region_config(&model)?;
    let sys = cfg.build_perturbation()?;
    let family = RegionFamily::new(model.clone(), region, sys)?;
    Ok(Prepared { model, region, family, run: cfg })
}

fn cmd_solve(args: &RunArgs) -> Result<bool, Error> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args);
    let dir = out_dir(&cfg, &args.out)?;
    let p = prepare(cfg)?;
    let solver = p.run.build_solver_config(p.model.grid())?;
    let result = solve_matching(&p.model, &p.family, &solver)?;

    write_file(&dir.join("prior.csv"), &prior_csv(&result.prior))?;
    write_file(
        &dir.join("coverage.csv"),
        &coverage_csv(p.model.grid(), &result.report),
    )?;
    write_file(&dir.join("trace.csv"), &trace_csv(&result))?;
    let summary = Summary {
        converged: result.converged,
        max_z: result.report.max_z,
        iters: result.iters,
        params: SummaryParams {
            kind: kind_name(p.region.kind),
            alpha: p.region.alpha,
            beta: p.region.beta,
            delta: p.region.delta,
            eta: p.region.eta,
            gamma: p.region.gamma,
            n_z: p.region.n_z,
            bisect_tol: p.region.bisect_tol,
            posterior_map_c: p.region.posterior_map_c,
            damping: solver.damping,
            tol: solver.tol,
            max_iters: solver.max_iters,
            restarts_used: result.restarts_used,
        },
        seed: solver.seed,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    write_file(&dir.join("summary.json"), &json)?;
    eprintln!(
        "solve: converged={} max_z={:.3e} iters={}",
        result.converged, result.report.max_z, result.iters
    );
    Ok(result.converged)
}

fn initial_prior(cfg: &RunConfig, model: &Model) -> Result<DiscreteMeasure, Error> {
    let solver = cfg.build_solver_config(model.grid())?;
    Ok(match solver.init {
        matchprior::matching::SolverInit::Uniform => {
            DiscreteMeasure::uniform(model.grid().clone())
        }
        matchprior::matching::SolverInit::Custom(p) => p,
    })
}

fn cmd_coverage(args: &RunArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args);
    let dir = out_dir(&cfg, &args.out)?;
    let p = prepare(cfg)?;
    let prior = initial_prior(&p.run, &p.model)?;
    let report = z_map(&p.model, &p.family, &prior)?;
    write_file(&dir.join("coverage.csv"), &coverage_csv(p.model.grid(), &report))?;
    eprintln!(
        "coverage: max_z={:.6e} at theta={:.6}",
        report.max_z,
        p.model.grid().point(report.argmax_theta)
    );
    Ok(())
}

fn cmd_region(args: &RegionArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.run.config)?;
    apply_overrides(&mut cfg, &args.run);
    if let Some(x) = args.x {
        cfg.x = Some(x);
    }
    let x = cfg.x.unwrap_or(0);
    let dir = out_dir(&cfg, &args.run.out)?;
    let p = prepare(cfg)?;
    if x >= p.model.n_x() {
        return Err(Error::Config(format!("x index {x} outside the sample space")));
    }
    let prior = initial_prior(&p.run, &p.model)?;
    let field = p.family.acceptance(&prior, x)?;
    let mut s = String::from("theta,psi\n");
    for (t, v) in p.model.grid().points().iter().zip(field.psi()) {
        s.push_str(&format!("{},{}\n", fmt(*t), fmt(*v)));
    }
    write_file(&dir.join("region.csv"), &s)?;
    Ok(())
}

/// The two-bump mixture family: `(1-c) Unif[-0.1, 0.1] + c Unif([-11, -10]
/// u [10, 11])`, discretized by exact cell overlap.
fn mixture_weights(grid: &ParameterGrid, c: f64) -> Vec<f64> {
    let overlap = |lo: f64, hi: f64, a: f64, b: f64| -> f64 {
        (hi.min(b) - lo.max(a)).max(0.0)
    };
    grid.points()
        .iter()
        .zip(grid.cell_weights())
        .map(|(&t, &w)| {
            let lo = t - 0.5 * w;
            let hi = t + 0.5 * w;
            let inner = overlap(lo, hi, -0.1, 0.1) / 0.2;
            let outer =
                (overlap(lo, hi, -11.0, -10.0) + overlap(lo, hi, 10.0, 11.0)) / 2.0;
            (1.0 - c) * inner + c * outer
        })
        .collect()
}

fn demo_ball_jump(out: &Option<PathBuf>, c_min: f64, c_max: f64, c_step: f64) -> Result<(), Error> {
    let dir = ensure_dir(out)?;
    let grid = Arc::new(ParameterGrid::uniform(-11.0, 11.0, 2200)?);
    let alpha = 0.5;
    let mut s = String::from("c,radius\n");
    let mut c = c_min;
    while c <= c_max + 1e-12 {
        let w = mixture_weights(&grid, c);
        let mu = GridMeasure::Discrete(DiscreteMeasure::from_weights(grid.clone(), &w)?);
        let ball = credible_ball(&mu, alpha)?;
        s.push_str(&format!("{},{}\n", fmt(c), fmt(ball.radius)));
        c += c_step;
    }
    write_file(&dir.join("ball_jump.csv"), &s)
}

fn demo_hpd_flip(out: &Option<PathBuf>, c: f64, cells: usize) -> Result<(), Error> {
    let dir = ensure_dir(out)?;
    let grid = Arc::new(ParameterGrid::uniform(0.0, 2.0 * std::f64::consts::PI, cells)?);
    let alpha = 0.5;
    let rho1: Vec<f64> = grid.points().iter().map(|t| 2.0 + c * t.sin()).collect();
    let rho2: Vec<f64> = grid.points().iter().map(|t| 2.0 - c * t.sin()).collect();
    let f1 = DensityField::from_values_normalized(grid.clone(), &rho1)?;
    let f2 = DensityField::from_values_normalized(grid.clone(), &rho2)?;
    let h1 = hpd_region(&f1, alpha)?;
    let h2 = hpd_region(&f2, alpha)?;
    let mut s = String::from("theta,psi_rho1,psi_rho2\n");
    for (i, &t) in grid.points().iter().enumerate() {
        s.push_str(&format!(
            "{},{},{}\n",
            fmt(t),
            fmt(h1.field.value(i)),
            fmt(h2.field.value(i))
        ));
    }
    write_file(&dir.join("hpd_flip.csv"), &s)
}

fn demo_figure1(out: &Option<PathBuf>) -> Result<(), Error> {
    let dir = ensure_dir(out)?;
    let grid = Arc::new(ParameterGrid::uniform(-1.0, 1.0, 800)?);
    let flat = GridMeasure::Density(DensityField::new(grid.clone(), vec![0.5; 800])?);
    let alpha = 0.5;
    let ball = credible_ball(&flat, alpha)?;
    let relaxed = relaxed_ball(&flat, alpha, 4.0, 1e-10)?;
    let cfg = RegionConfig {
        beta: 4.0,
        delta: 0.25,
        eta: 0.25,
        gamma: 1e-9,
        ..RegionConfig::new(RegionKind::PerturbedBall, alpha)
    };
    let perturbed = perturbed_region(&flat, &flat, BaseKind::Ball, &cfg)?;
    let mut s = String::from("theta,psi_ball,psi_relaxed,psi_perturbed\n");
    for (i, &t) in grid.points().iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt(t),
            fmt(ball.field.value(i)),
            fmt(relaxed.field.value(i)),
            fmt(perturbed.field.value(i))
        ));
    }
    write_file(&dir.join("figure1.csv"), &s)
}

fn ensure_dir(out: &Option<PathBuf>) -> Result<PathBuf, Error> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(args) => cmd_solve(args).map(|converged| {
            if converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }),
        Command::Coverage(args) => cmd_coverage(args).map(|_| ExitCode::SUCCESS),
        Command::Region(args) => cmd_region(args).map(|_| ExitCode::SUCCESS),
        Command::Demo(args) => match &args.which {
            DemoKind::BallJump { out, c_min, c_max, c_step } => {
                demo_ball_jump(out, *c_min, *c_max, *c_step).map(|_| ExitCode::SUCCESS)
            }
            DemoKind::HpdFlip { out, c, cells } => {
                demo_hpd_flip(out, *c, *cells).map(|_| ExitCode::SUCCESS)
            }
            DemoKind::Figure1 { out } => demo_figure1(out).map(|_| ExitCode::SUCCESS),
        },
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
