//! `hbvm`: batch runner for the integrators in the `hbvm` crate.
//!
//! Exit codes: 0 success, 2 usage error (nothing written), 3 numeric failure,
//! 1 I/O failure.

mod config;
mod method;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;

use hbvm::diagnostics::{
    compare_node_families_with, empirical_order_with, energy_report, write_run_json, write_trajectory_csv,
    RunSummary, ORDER_END_TIME,
};
use hbvm::integrator::{integrate, stability_value, JacobianSource, SolverConfig, SolverScheme};
use hbvm::numfmt::{ser_f64, ser_vec, sci17};
use hbvm::problems::{problem_by_name, ProblemInstance};

use config::ConfigFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(hbvm::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

/// Configuration problems reported by the library are usage errors; anything
/// else is a numeric failure.
fn numeric(e: hbvm::Error) -> CliError {
    match e.root() {
        hbvm::Error::Config(msg) => CliError::Usage(msg.clone()),
        _ => CliError::Numeric(e),
    }
}

#[derive(Parser)]
#[command(name = "hbvm", version, about = "Energy-conserving integrators for Hamiltonian systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a problem and write the trajectory with its energy error.
    Run(RunArgs),
    /// Max difference between Gauss- and Lobatto-node HBVM(k,s) for several k.
    Table1(Table1Args),
    /// Empirical convergence order by step halving.
    OrderStudy(OrderArgs),
    /// |R(iy)| along the imaginary axis.
    StabilityScan(ScanArgs),
    /// Print a method's Butcher tableau.
    Tableau(TableauArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Format as ValueEnum>::from_str(s, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Newton,
    FixedPoint,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Scheme as ValueEnum>::from_str(s, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Jacobian {
    Auto,
    Fd,
}

impl std::str::FromStr for Jacobian {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Jacobian as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Clone)]
struct Output {
    /// Output file; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Omit the `#` metadata header from CSV output.
    #[arg(long)]
    no_metadata: bool,
}

#[derive(Args, Clone)]
struct Solver {
    /// Absolute tolerance of the stage iteration.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<Scheme>,
    #[arg(long, value_enum)]
    jacobian: Option<Jacobian>,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Step size; defaults to the problem's own.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    out: Output,
    #[command(flatten)]
    solver: Solver,
}

#[derive(Args)]
struct Table1Args {
    #[arg(long, default_value = "biot")]
    problem: String,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    h: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[command(flatten)]
    out: Output,
    #[command(flatten)]
    solver: Solver,
}

#[derive(Args)]
struct OrderArgs {
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "lotka")]
    problem: String,
    /// Coarsest step size; it must divide the end time.
    #[arg(long, default_value_t = 0.25)]
    h0: f64,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = ORDER_END_TIME)]
    t_end: f64,
    #[command(flatten)]
    out: Output,
    #[command(flatten)]
    solver: Solver,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 1e-2)]
    y_min: f64,
    #[arg(long, default_value_t = 1e3)]
    y_max: f64,
    #[arg(long, default_value_t = 201)]
    points: usize,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct TableauArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    json: bool,
}

fn solver_config(file: &ConfigFile, s: &Solver) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig::default();
    if let Some(tol) = file.pick(s.tol, "tol")? {
        cfg.tol = tol;
    }
    if let Some(n) = file.pick(s.max_iter, "max-iter")? {
        cfg.max_iter = n;
    }
    if let Some(scheme) = file.pick(s.solver, "solver")? {
        cfg.scheme = match scheme {
            Scheme::Newton => SolverScheme::SimplifiedNewton,
            Scheme::FixedPoint => SolverScheme::FixedPoint,
        };
    }
    if let Some(j) = file.pick(s.jacobian, "jacobian")? {
        cfg.jacobian = match j {
            Jacobian::Auto => JacobianSource::Auto,
            Jacobian::Fd => JacobianSource::FiniteDifference,
        };
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn problem(name: &str) -> Result<ProblemInstance, CliError> {
    problem_by_name(name).map_err(|e| CliError::Usage(e.to_string()))
}

fn positive(name: &str, x: f64) -> Result<f64, CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CliError::Usage(format!("{name} must be a positive number, got {x}")))
    }
}

/// Writes `bytes` to the output file, or stdout. Called only once everything
/// has been computed, so failed runs leave no files behind.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn header(buf: &mut String, meta: &[(&str, String)], enabled: bool) {
    if enabled {
        for (k, v) in meta {
            let _ = writeln!(buf, "# {k}: {v}");
        }
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let problem_name: String = file
        .pick(args.problem.clone(), "problem")?
        .ok_or_else(|| CliError::Usage("--problem is required".into()))?;
    let method_text: String = file
        .pick(args.method.clone(), "method")?
        .ok_or_else(|| CliError::Usage("--method is required".into()))?;
    let prob = problem(&problem_name)?;
    let desc = method::parse(&method_text)?;
    let m = desc.method(&problem_name, method::lotka_params(&problem_name))?;
    let h = positive("h", file.pick(args.h, "h")?.unwrap_or(prob.default_h))?;
    let steps = file
        .pick(args.steps, "steps")?
        .ok_or_else(|| CliError::Usage("--steps is required".into()))?;
    let output: Option<PathBuf> = file.pick(args.out.output.clone(), "output")?;
    let format = file.pick(args.out.format, "format")?.unwrap_or(Format::Csv);
    let metadata = !args.out.no_metadata && file.pick::<bool>(None, "metadata")?.unwrap_or(true);
    let cfg = solver_config(&file, &args.solver)?;

    let sys = prob.system.as_ref();
    let traj = integrate(&m, sys, &prob.y0, h, steps, &cfg).map_err(numeric)?;
    let report = energy_report(&traj, sys).map_err(numeric)?;
    let summary = RunSummary::new(&problem_name, &m.label(), h, &traj, &report);

    let mut bytes = Vec::new();
    match format {
        Format::Csv => {
            let meta = if metadata {
                vec![
                    ("problem", problem_name.clone()),
                    ("method", m.label()),
                    ("h", sci17(h)),
                    ("steps", steps.to_string()),
                    ("tol", sci17(cfg.tol)),
                    ("max_abs_H_err", sci17(report.max_abs)),
                    ("drift_slope", sci17(report.drift_slope)),
                    ("drift_t_stat", sci17(report.drift_pvalue_proxy)),
                    ("flagged_steps", traj.flagged_steps().to_string()),
                ]
            } else {
                Vec::new()
            };
            write_trajectory_csv(&mut bytes, &traj, &report, &meta)?;
        }
        Format::Json => write_run_json(&mut bytes, &summary, &traj, &report)?,
    }
    emit(output.as_deref(), &bytes)?;
    eprintln!(
        "{} on {}: {} steps, max |H - H0| = {:.3e}, {} flagged",
        summary.method, problem_name, steps, report.max_abs, summary.flagged_steps
    );
    Ok(())
}

#[derive(Serialize)]
struct Table1Doc<'a> {
    problem: &'a str,
    s: usize,
    #[serde(serialize_with = "ser_f64")]
    h: f64,
    steps: usize,
    k: &'a [usize],
    #[serde(serialize_with = "ser_vec")]
    max_diff: &'a [f64],
}

fn cmd_table1(args: Table1Args) -> Result<(), CliError> {
    let prob = problem(&args.problem)?;
    positive("h", args.h)?;
    if args.k.is_empty() || args.k.iter().any(|&k| k < args.s) || args.s == 0 {
        return Err(CliError::Usage(format!("need 1 <= s <= k for every k, got s = {}", args.s)));
    }
    let cfg = solver_config(&ConfigFile::default(), &args.solver)?;
    let d = compare_node_families_with(args.s, &args.k, &prob, args.h, args.steps, &cfg).map_err(numeric)?;
    let bytes = match args.out.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut buf = String::new();
            let meta = [
                ("problem", args.problem.clone()),
                ("s", args.s.to_string()),
                ("h", sci17(args.h)),
                ("steps", args.steps.to_string()),
            ];
            header(&mut buf, &meta, !args.out.no_metadata);
            buf.push_str("k,max_diff\n");
            for (k, v) in args.k.iter().zip(&d) {
                let _ = writeln!(buf, "{k},{}", sci17(*v));
            }
            buf.into_bytes()
        }
        Format::Json => json(&Table1Doc {
            problem: &args.problem,
            s: args.s,
            h: args.h,
            steps: args.steps,
            k: &args.k,
            max_diff: &d,
        }),
    };
    emit(args.out.output.as_deref(), &bytes)
}

fn cmd_order(args: OrderArgs) -> Result<(), CliError> {
    let prob = problem(&args.problem)?;
    let m = method::parse(&args.method)?.method(&args.problem, method::lotka_params(&args.problem))?;
    positive("h0", args.h0)?;
    positive("t-end", args.t_end)?;
    let cfg = solver_config(&ConfigFile::default(), &args.solver)?;
    let est = empirical_order_with(&m, &prob, args.h0, args.levels, args.t_end, &cfg).map_err(numeric)?;
    let bytes = match args.out.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut buf = String::new();
            let meta = [
                ("problem", args.problem.clone()),
                ("method", m.label()),
                ("t_end", sci17(args.t_end)),
                ("final_order", sci17(est.final_order)),
            ];
            header(&mut buf, &meta, !args.out.no_metadata);
            buf.push_str("h,error,order\n");
            for (i, (h, e)) in est.steps.iter().zip(&est.errors).enumerate() {
                let order = if i == 0 { String::new() } else { sci17(est.orders[i - 1]) };
                let _ = writeln!(buf, "{},{},{order}", sci17(*h), sci17(*e));
            }
            buf.into_bytes()
        }
        Format::Json => json(&est),
    };
    emit(args.out.output.as_deref(), &bytes)?;
    eprintln!("{} on {}: order {:.3}", m.label(), args.problem, est.final_order);
    Ok(())
}

#[derive(Serialize)]
struct ScanDoc<'a> {
    method: &'a str,
    #[serde(serialize_with = "ser_f64")]
    max_deviation: f64,
    #[serde(serialize_with = "ser_vec")]
    y: &'a [f64],
    #[serde(serialize_with = "ser_vec")]
    abs_r: &'a [f64],
}

fn cmd_scan(args: ScanArgs) -> Result<(), CliError> {
    let t = method::parse(&args.method)?.tableau()?;
    positive("y-min", args.y_min)?;
    if !(args.y_max > args.y_min) || args.points < 2 {
        return Err(CliError::Usage("need y-min < y-max and at least 2 points".into()));
    }
    let (l0, l1) = (args.y_min.log10(), args.y_max.log10());
    let ys: Vec<f64> = (0..args.points)
        .map(|i| 10f64.powf(l0 + (l1 - l0) * i as f64 / (args.points - 1) as f64))
        .collect();
    let abs_r = ys
        .iter()
        .map(|&y| stability_value(&t, Complex64::new(0.0, y)).map(|r| r.norm()))
        .collect::<hbvm::Result<Vec<f64>>>()
        .map_err(numeric)?;
    let max_dev = abs_r.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let bytes = match args.out.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut buf = String::new();
            let meta = [("method", t.label.clone()), ("max_deviation", sci17(max_dev))];
            header(&mut buf, &meta, !args.out.no_metadata);
            buf.push_str("y,abs_R\n");
            for (y, r) in ys.iter().zip(&abs_r) {
                let _ = writeln!(buf, "{},{}", sci17(*y), sci17(*r));
            }
            buf.into_bytes()
        }
        Format::Json => json(&ScanDoc {
            method: &t.label,
            max_deviation: max_dev,
            y: &ys,
            abs_r: &abs_r,
        }),
    };
    emit(args.out.output.as_deref(), &bytes)?;
    eprintln!("{}: max ||R(iy)| - 1| = {max_dev:.3e}", t.label);
    Ok(())
}

fn cmd_tableau(args: TableauArgs) -> Result<(), CliError> {
    let t = method::parse(&args.method)?.tableau()?;
    let text = if args.json { t.to_json() + "\n" } else { t.to_string() };
    emit(None, text.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Table1(a) => cmd_table1(a),
        Command::OrderStudy(a) => cmd_order(a),
        Command::StabilityScan(a) => cmd_scan(a),
        Command::Tableau(a) => cmd_tableau(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(_) => eprintln!("hbvm: usage error: {e}"),
                CliError::Numeric(hbvm::Error::Step { step, source }) => {
                    eprintln!("hbvm: numeric failure at step {step}: {source}")
                }
                CliError::Numeric(_) => eprintln!("hbvm: numeric failure: {e}"),
                CliError::Io(_) => eprintln!("hbvm: {e}"),
            }
            ExitCode::from(e.code())
        }
    }
}
