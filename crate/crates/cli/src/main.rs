use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pmpopt::baselines::BaselineConfig;
use pmpopt::harness::{
    self, default_baseline, default_oc, ExperimentSpec, MethodSpec, PhaseSchedule, RunStatus,
    SweepSpec, FIGURES,
};
use pmpopt::numerics::Matrix;
use pmpopt::objective::{registry_get, CASE_NAMES};
use pmpopt::ocsolver::{InitControl, SolverConfig, StepRule};

#[derive(Parser)]
#[command(name = "pmpopt", version, about = "Minimization by discrete-time optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, from flags or a JSON experiment spec.
    Solve(SolveArgs),
    /// Solve one case for several control weights R.
    Sweep(SweepArgs),
    /// Run an alternating-axis phase schedule from a JSON file.
    Schedule(ScheduleArgs),
    /// Regenerate the artifacts of a bundled figure, or `all`.
    Repro(ReproArgs),
    /// List the registered objectives and figures.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Oc,
    Gd,
    Newton,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Fixed,
    Halving,
    Adaptive,
}

#[derive(Args)]
struct OcFlags {
    /// Scalar control weight; R = r * I.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_outer: usize,
    #[arg(long, value_enum, default_value_t = Rule::Adaptive)]
    step_rule: Rule,
    /// Constant initial control; ignored when --seed is given.
    #[arg(long, default_value_t = 1e-3)]
    init: f64,
    /// Draw the initial controls uniformly from [-init, init] with this seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl OcFlags {
    fn config(&self, dim: usize) -> SolverConfig {
        let init = match self.seed {
            Some(seed) => InitControl::Random {
                scale: self.init,
                seed,
            },
            None => InitControl::Constant { value: self.init },
        };
        SolverConfig::new(self.horizon, Matrix::scaled_identity(dim, self.r), self.alpha)
            .with_epsilon(self.epsilon)
            .with_max_outer(self.max_outer)
            .with_init(init)
            .with_step_rule(match self.step_rule {
                Rule::Fixed => StepRule::Fixed,
                Rule::Halving => StepRule::halving(),
                Rule::Adaptive => StepRule::adaptive(),
            })
    }
}

#[derive(Args)]
struct SolveArgs {
    /// JSON experiment spec; overrides every other flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    case: Option<String>,
    #[arg(long, value_enum, default_value_t = Method::Oc)]
    method: Method,
    /// Starting point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[command(flatten)]
    oc: OcFlags,
    /// Step size for gradient descent.
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    case: String,
    /// Control weights, comma separated.
    #[arg(long = "r-values", value_delimiter = ',', required = true)]
    r_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// JSON solver config shared by every row; replaces the solver flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    oc: OcFlags,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    figure: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// A bare experiment spec, or a run manifest carrying one under `spec`.
fn read_spec(path: &Path) -> Result<ExperimentSpec> {
    let mut value: serde_json::Value = read_json(path)?;
    if let Some(spec) = value.get_mut("spec") {
        value = spec.take();
    }
    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))
}

fn solve(args: SolveArgs) -> Result<u8> {
    let spec = match &args.config {
        Some(path) => read_spec(path)?,
        None => {
            let case_name = args.case.clone().expect("clap requires --case");
            let case = registry_get(&case_name)?;
            let dim = case.objective.dim();
            let baseline = BaselineConfig {
                eta: args.eta,
                grad_tol: args.grad_tol,
                ..default_baseline(args.eta).with_max_iters(args.max_iters)
            };
            let method = match args.method {
                Method::Oc => MethodSpec::Oc(args.oc.config(dim)),
                Method::Gd => MethodSpec::Gd(baseline),
                Method::Newton => MethodSpec::Newton(baseline),
            };
            let id = args.id.clone().unwrap_or_else(|| format!("{case_name}_{}", method.label()));
            let mut spec = ExperimentSpec::new(id, case_name, method);
            spec.x0 = args.x0.clone();
            spec
        }
    };
    let outcome = harness::run_experiment(&spec, &args.out)?;
    print_json(&outcome)?;
    Ok(outcome.status.exit_code() as u8)
}

fn sweep(args: SweepArgs) -> Result<u8> {
    let case = registry_get(&args.case)?;
    let solver = match &args.config {
        Some(path) => read_json(path)?,
        None => args.oc.config(case.objective.dim()),
    };
    let spec = SweepSpec {
        id: format!("{}_sweep", args.case),
        case: args.case.clone(),
        x0: args.x0.clone(),
        r_values: args.r_values.clone(),
        solver,
    };
    let rows = harness::r_sweep(&spec, Some(&args.out))?;
    for row in &rows {
        match &row.outcome {
            Some(o) => eprintln!(
                "R = {:<10} {:?} final {:?} nearest {:?} larger-R-nearer: {:?}",
                row.r,
                o.status,
                o.final_point,
                o.nearest_minimum.as_ref().map(|m| &m.reported),
                row.larger_r_nearer_minimum
            ),
            None => eprintln!("R = {:<10} failed: {}", row.r, row.error.as_deref().unwrap_or("?")),
        }
    }
    print_json(&rows)?;
    let worst = rows
        .iter()
        .map(|r| r.outcome.as_ref().map_or(3, |o| o.status.exit_code()))
        .max()
        .unwrap_or(0);
    Ok(worst as u8)
}

fn schedule(args: ScheduleArgs) -> Result<u8> {
    let sched: PhaseSchedule = read_json(&args.config)?;
    let (outcome, series) = harness::run_schedule(&sched)?;
    harness::write_schedule(&sched, &outcome, &series, &args.out)?;
    print_json(&outcome)?;
    let code = match outcome.phases.last() {
        _ if outcome.completed => RunStatus::Converged,
        Some(p) if p.termination == pmpopt::ocsolver::Termination::NumericalError => {
            RunStatus::NumericalError
        }
        _ => RunStatus::MaxIters,
    };
    Ok(code.exit_code() as u8)
}

fn repro(args: ReproArgs) -> Result<u8> {
    let figures: Vec<&str> = if args.figure == "all" {
        FIGURES.to_vec()
    } else if FIGURES.contains(&args.figure.as_str()) {
        vec![args.figure.as_str()]
    } else {
        bail!("unknown figure {:?}; expected one of {} or all", args.figure, FIGURES.join(", "));
    };
    let reports = harness::repro_many(&figures, &args.out)?;
    for r in &reports {
        eprintln!("{}: {} files", r.figure, r.files.len());
    }
    eprintln!("index: {}", args.out.join("index.json").display());
    Ok(0)
}

fn list() -> Result<u8> {
    for name in CASE_NAMES {
        let case = registry_get(name)?;
        let minima: Vec<_> = case.minima.iter().map(|m| &m.reported).collect();
        println!("{name:<10} {} | x0 {:?} | minima {:?}", case.formula, case.x0, minima);
    }
    println!("figures: {}", FIGURES.join(" "));
    let example = ExperimentSpec::new("example", "f1", MethodSpec::Oc(default_oc(Matrix::identity(1))));
    println!("spec example: {}", serde_json::to_string(&example)?);
    Ok(0)
}

fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Solve(a) => solve(a),
        Command::Sweep(a) => sweep(a),
        Command::Schedule(a) => schedule(a),
        Command::Repro(a) => repro(a),
        Command::List => list(),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        1
    })
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path, args: &[&str]) -> u8 {
        let out = dir.to_str().unwrap();
        let mut full = vec!["pmpopt"];
        full.extend_from_slice(args);
        full.extend_from_slice(&["--out", out]);
        run(full)
    }

    #[test]
    fn exit_codes_follow_termination() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        assert_eq!(run_in(d, &["solve", "--case", "f1", "--r", "200"]), 0);
        assert_eq!(run_in(d, &["solve", "--case", "f1", "--max-outer", "5", "--id", "short"]), 2);
        let fixed = ["solve", "--case", "f1", "--step-rule", "fixed", "--alpha", "1e-3", "--id", "big"];
        assert_eq!(run_in(d, &fixed), 3);
        assert_eq!(run_in(d, &["solve", "--case", "f3", "--method", "newton"]), 3);
        assert!(d.join("f1_oc.csv").exists());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        assert_eq!(run(["pmpopt", "frobnicate"]), 1);
        assert_eq!(run(["pmpopt", "solve"]), 1);
        assert_eq!(run_in(d, &["solve", "--case", "f42"]), 1);
        assert_eq!(run_in(d, &["repro", "fig99"]), 1);
        assert_eq!(run_in(d, &["solve", "--case", "f1", "--r=-1"]), 1);
        assert_eq!(run(["pmpopt", "--help"]), 0);
    }

    #[test]
    fn manifest_round_trip_through_solve() {
        let dir = tempfile::tempdir().unwrap();
        let again = tempfile::tempdir().unwrap();
        let args = ["solve", "--case", "f7", "--x0", "1,-1", "--r", "8", "--seed", "5", "--horizon", "20"];
        assert_eq!(run_in(dir.path(), &args), 0);
        let manifest = dir.path().join("f7_oc.json");
        let code = run_in(again.path(), &["solve", "--config", manifest.to_str().unwrap()]);
        assert_eq!(code, 0);
        let a = std::fs::read(dir.path().join("f7_oc.csv")).unwrap();
        let b = std::fs::read(again.path().join("f7_oc.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_and_schedule_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let code = run_in(d, &["sweep", "--case", "f6", "--r-values", "1,500", "--horizon", "100"]);
        assert_eq!(code, 0);
        assert!(d.join("f6_sweep_r500.json").exists());

        let (plan, _) = harness::figure_plan("fig14c").unwrap();
        let path = d.join("sched.json");
        std::fs::write(&path, serde_json::to_string(&plan.schedule.unwrap()).unwrap()).unwrap();
        assert_eq!(run_in(d, &["schedule", path.to_str().unwrap()]), 0);
        assert!(d.join("f8_schedule_c.csv").exists());
    }

    #[test]
    fn list_runs() {
        assert_eq!(run(["pmpopt", "list"]), 0);
    }
}
