//! Experiment engine: single runs, R-sweeps, alternating-axis schedules and
//! the bundled figure reproductions. Every run writes one CSV series and one
//! JSON manifest that is sufficient to re-execute it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineConfig, BaselineError, BaselineReport, BaselineTermination};
use crate::numerics::{dist2, spd_check, Matrix};
use crate::objective::{registry_get, ReferenceCase, UnknownCase};
use crate::ocsolver::{
    self, steady_state_extract, steps_to_plateau, verify_pmp, InitControl, SolveReport,
    SolverConfig, SolverError, Steadiness, StepRule, Termination, WEIGHT_SYM_TOL,
};

/// Below this magnitude a target component is compared in absolute terms.
pub const ZERO_GUARD: f64 = 1e-9;
/// Increments smaller than this do not count towards the oscillation metric.
pub const OSC_DEADBAND: f64 = 1e-9;
/// Distance to the target that counts as having reached it.
pub const PLATEAU_TOL: f64 = 1e-2;
/// Tail control norm below which an OC trajectory is reported steady.
pub const STEADY_TOL: f64 = 1e-3;
pub const DEFAULT_WAYPOINT_RADIUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    UnknownCase(#[from] UnknownCase),
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("unknown figure {0:?}")]
    UnknownFigure(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum MethodSpec {
    Oc(SolverConfig),
    Gd(BaselineConfig),
    Newton(BaselineConfig),
}

impl MethodSpec {
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::Oc(_) => "oc",
            MethodSpec::Gd(_) => "gd",
            MethodSpec::Newton(_) => "newton",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// File stem for the CSV and manifest.
    pub id: String,
    pub case: String,
    /// Overrides the case's starting point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub method: MethodSpec,
    /// Replaces the seed of a random initial control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Index of the registered minimum used for error series; defaults to
    /// the one nearest the final point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl ExperimentSpec {
    pub fn new(id: impl Into<String>, case: impl Into<String>, method: MethodSpec) -> Self {
        Self {
            id: id.into(),
            case: case.into(),
            x0: None,
            method,
            seed: None,
            target: None,
        }
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn with_target(mut self, target: usize) -> Self {
        self.target = Some(target);
        self
    }

    fn resolve(&self) -> Result<(ReferenceCase, Vec<f64>), HarnessError> {
        let case = registry_get(&self.case)?;
        let x0 = self.x0.clone().unwrap_or_else(|| case.x0.clone());
        let dim = case.objective.dim();
        if x0.len() != dim {
            return Err(HarnessError::InvalidSpec(format!(
                "x0 has {} components, {} expects {dim}",
                x0.len(),
                case.name
            )));
        }
        if let Some(t) = self.target {
            if t >= case.minima.len() {
                return Err(HarnessError::InvalidSpec(format!(
                    "target {t} out of range for {}",
                    case.name
                )));
            }
        }
        match &self.method {
            MethodSpec::Oc(cfg) => {
                cfg.validate()?;
                if cfg.weight.dim() != dim {
                    return Err(HarnessError::InvalidSpec(format!(
                        "weight is {0}x{0}, {1} expects {dim}",
                        cfg.weight.dim(),
                        case.name
                    )));
                }
            }
            MethodSpec::Gd(cfg) | MethodSpec::Newton(cfg) => cfg.validate()?,
        }
        Ok((case, x0))
    }

    fn effective_method(&self) -> MethodSpec {
        let mut method = self.method.clone();
        if let (MethodSpec::Oc(cfg), Some(seed)) = (&mut method, self.seed) {
            if let InitControl::Random { seed: s, .. } = &mut cfg.init_control {
                *s = seed;
            }
        }
        method
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    NumericalError,
    Diverged,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::MaxIters => 2,
            RunStatus::NumericalError | RunStatus::Diverged => 3,
        }
    }
}

impl From<Termination> for RunStatus {
    fn from(t: Termination) -> Self {
        match t {
            Termination::Converged => RunStatus::Converged,
            Termination::MaxIters => RunStatus::MaxIters,
            Termination::NumericalError => RunStatus::NumericalError,
        }
    }
}

impl From<BaselineTermination> for RunStatus {
    fn from(t: BaselineTermination) -> Self {
        match t {
            BaselineTermination::Converged => RunStatus::Converged,
            BaselineTermination::MaxIters => RunStatus::MaxIters,
            BaselineTermination::Diverged => RunStatus::Diverged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestMinimum {
    pub index: usize,
    pub reported: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub id: String,
    pub case: String,
    pub method: String,
    pub x0: Vec<f64>,
    pub status: RunStatus,
    pub final_point: Vec<f64>,
    pub nearest_minimum: Option<NearestMinimum>,
    /// Outer iterations for OC, iterate count for the baselines.
    pub iterations: usize,
    pub target: usize,
    pub target_point: Vec<f64>,
    pub error_modes: Vec<ErrorMode>,
    pub terminal_error: Vec<f64>,
    /// Series rows needed before the series stays within `PLATEAU_TOL`.
    pub steps_to_plateau: Option<usize>,
    /// `oscillation_metric` over the second half of the series.
    pub oscillation: usize,
    /// The same count over the whole series.
    pub oscillation_full: usize,
    pub rows: usize,
    /// Set when non-finite rows were dropped from the series.
    pub truncated_at: Option<usize>,
    pub singular_hessian_events: usize,
    pub final_residual: Option<f64>,
    pub pmp_residual: Option<f64>,
    pub steadiness: Option<Steadiness>,
    pub failure: Option<String>,
}

impl RunOutcome {
    pub fn distance_to(&self, point: &[f64]) -> f64 {
        dist2(&self.final_point, point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub err: Vec<f64>,
}

/// Everything a run produced, before any file is written.
#[derive(Debug, Clone)]
pub struct Executed {
    pub spec: ExperimentSpec,
    pub outcome: RunOutcome,
    pub series: Vec<SeriesRow>,
    pub solve: Option<SolveReport>,
    pub baseline: Option<BaselineReport>,
}

impl Executed {
    /// The points of the series: OC states or baseline iterates.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.series.iter().map(|r| r.x.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub spec: ExperimentSpec,
    pub effective_method: MethodSpec,
    pub outcome: RunOutcome,
    pub csv: String,
    pub notes: Vec<String>,
}

/// Componentwise `(x_k - x*) / x*`, or `x_k - x*` where `|x*_i| < ZERO_GUARD`.
pub fn relative_error_series(
    history: &[Vec<f64>],
    target: &[f64],
) -> (Vec<Vec<f64>>, Vec<ErrorMode>) {
    let modes: Vec<ErrorMode> = target
        .iter()
        .map(|t| {
            if t.abs() < ZERO_GUARD {
                ErrorMode::Absolute
            } else {
                ErrorMode::Relative
            }
        })
        .collect();
    let errs = history
        .iter()
        .map(|x| {
            x.iter()
                .zip(target)
                .zip(&modes)
                .map(|((xi, ti), m)| match m {
                    ErrorMode::Relative => (xi - ti) / ti,
                    ErrorMode::Absolute => xi - ti,
                })
                .collect()
        })
        .collect();
    (errs, modes)
}

/// Sign changes between consecutive per-step increments over the second
/// half of `points`, summed over coordinates. Increments within `deadband`
/// of zero are skipped.
pub fn oscillation_metric(points: &[Vec<f64>], deadband: f64) -> usize {
    if points.len() < 3 {
        return 0;
    }
    sign_changes(&points[points.len() / 2..], deadband)
}

/// Sign changes between consecutive increments over all of `points`.
pub fn sign_changes(tail: &[Vec<f64>], deadband: f64) -> usize {
    let Some(dim) = tail.first().map(Vec::len) else {
        return 0;
    };
    let mut count = 0;
    for i in 0..dim {
        let mut prev_sign = 0.0;
        for w in tail.windows(2) {
            let d = w[1][i] - w[0][i];
            if d.abs() <= deadband || !d.is_finite() {
                continue;
            }
            let s = d.signum();
            if prev_sign != 0.0 && s != prev_sign {
                count += 1;
            }
            prev_sign = s;
        }
    }
    count
}

fn pick_target(case: &ReferenceCase, requested: Option<usize>, final_point: &[f64]) -> usize {
    requested.unwrap_or_else(|| {
        let finite = final_point.iter().all(|v| v.is_finite());
        case.minima
            .iter()
            .enumerate()
            .map(|(i, m)| (i, if finite { dist2(final_point, &m.refined) } else { 0.0 }))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(i, _)| i)
    })
}

/// Runs a spec without touching the file system.
pub fn execute(spec: &ExperimentSpec) -> Result<Executed, HarnessError> {
    let (case, x0) = spec.resolve()?;
    let method = spec.effective_method();
    let obj = &case.objective;

    let (points, controls, status, iterations, solve, baseline, failure) = match &method {
        MethodSpec::Oc(cfg) => {
            let rep = ocsolver::solve(obj, &x0, cfg)?;
            let states = rep.trajectory.states.to_vecs();
            let mut controls: Vec<Option<Vec<f64>>> =
                rep.trajectory.controls.to_vecs().into_iter().map(Some).collect();
            controls.push(None);
            let failure = rep.failure.clone();
            (
                states,
                controls,
                RunStatus::from(rep.termination),
                rep.outer_iters,
                Some(rep),
                None,
                failure,
            )
        }
        MethodSpec::Gd(cfg) | MethodSpec::Newton(cfg) => {
            let rep = if matches!(method, MethodSpec::Gd(_)) {
                baselines::gradient_descent(obj, &x0, cfg)?
            } else {
                baselines::newton(obj, &x0, cfg)?
            };
            let h = &rep.history;
            let mut controls: Vec<Option<Vec<f64>>> = h
                .windows(2)
                .map(|w| Some(w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()))
                .collect();
            controls.push(None);
            let failure = rep.failure.clone();
            (
                h.clone(),
                controls,
                RunStatus::from(rep.termination),
                rep.iterations(),
                None,
                Some(rep),
                failure,
            )
        }
    };

    let finite_rows = points
        .iter()
        .position(|x| !x.iter().all(|v| v.is_finite()))
        .unwrap_or(points.len());
    let truncated_at = (finite_rows < points.len()).then_some(finite_rows);
    let points = &points[..finite_rows];
    let final_point = points.last().cloned().unwrap_or_else(|| x0.clone());

    let target = pick_target(&case, spec.target, &final_point);
    let target_point = case.minima[target].refined.clone();
    let (errs, error_modes) = relative_error_series(points, &target_point);

    let series: Vec<SeriesRow> = points
        .iter()
        .zip(errs)
        .zip(controls)
        .enumerate()
        .map(|(k, ((x, err), u))| SeriesRow {
            k,
            x: x.clone(),
            u: u.filter(|u| u.iter().all(|v| v.is_finite())),
            err,
        })
        .collect();

    let nearest_minimum = case.nearest_minimum(&final_point).map(|(i, d)| NearestMinimum {
        index: i,
        reported: case.minima[i].reported.clone(),
        distance: d,
    });
    let plateau = steps_to_plateau(
        &ocsolver::Sequence::from_vecs(points),
        &target_point,
        PLATEAU_TOL,
    );
    let (final_residual, pmp_residual, steadiness) = match (&solve, &method) {
        (Some(rep), MethodSpec::Oc(cfg)) => (
            Some(rep.final_residual()),
            if rep.converged() {
                verify_pmp(obj, &cfg.weight, rep).ok().map(|p| p.max_residual)
            } else {
                None
            },
            Some(steady_state_extract(&rep.trajectory, STEADY_TOL)),
        ),
        _ => (None, None, None),
    };

    let outcome = RunOutcome {
        id: spec.id.clone(),
        case: case.name.clone(),
        method: method.label().into(),
        x0,
        status,
        terminal_error: series.last().map(|r| r.err.clone()).unwrap_or_default(),
        final_point,
        nearest_minimum,
        iterations,
        target,
        target_point,
        error_modes,
        steps_to_plateau: plateau,
        oscillation: oscillation_metric(points, OSC_DEADBAND),
        oscillation_full: sign_changes(points, OSC_DEADBAND),
        rows: series.len(),
        truncated_at,
        singular_hessian_events: baseline.as_ref().map_or(0, |b| b.singular_hessian.len()),
        final_residual,
        pmp_residual,
        steadiness,
        failure,
    };
    Ok(Executed {
        spec: spec.clone(),
        outcome,
        series,
        solve,
        baseline,
    })
}

fn fmt_num(out: &mut String, v: f64) {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        let _ = write!(out, "{v}");
    } else {
        let _ = write!(out, "{v:e}");
    }
}

pub fn series_csv(series: &[SeriesRow], dim: usize) -> String {
    let mut out = String::from("k");
    for prefix in ["x", "u", "err"] {
        for i in 0..dim {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push('\n');
    for row in series {
        let _ = write!(out, "{}", row.k);
        for v in &row.x {
            out.push(',');
            fmt_num(&mut out, *v);
        }
        match &row.u {
            Some(u) => {
                for v in u {
                    out.push(',');
                    fmt_num(&mut out, *v);
                }
            }
            None => out.push_str(&",".repeat(dim)),
        }
        for v in &row.err {
            out.push(',');
            fmt_num(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn manifest_notes(outcome: &RunOutcome) -> Vec<String> {
    let mut notes = vec![format!(
        "err_i is relative, (x_i - x*_i) / x*_i, unless |x*_i| < {ZERO_GUARD:e}, where it is absolute"
    )];
    if let Some(k) = outcome.truncated_at {
        notes.push(format!("series truncated before non-finite row {k}"));
    }
    notes
}

/// Writes `<id>.csv` and `<id>.json` under `out_dir`.
pub fn write_run(done: &Executed, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let csv_path = out_dir.join(format!("{}.csv", done.spec.id));
    let json_path = out_dir.join(format!("{}.json", done.spec.id));
    let dim = done.outcome.x0.len();
    write_file(&csv_path, &series_csv(&done.series, dim))?;
    let manifest = Manifest {
        tool: "pmpopt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        spec: done.spec.clone(),
        effective_method: done.spec.effective_method(),
        outcome: done.outcome.clone(),
        csv: csv_path.file_name().unwrap().to_string_lossy().into_owned(),
        notes: manifest_notes(&done.outcome),
    };
    write_file(&json_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(vec![csv_path, json_path])
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunOutcome, HarnessError> {
    let done = execute(spec)?;
    write_run(&done, out_dir)?;
    Ok(done.outcome)
}

/// Re-executes the run a manifest describes.
pub fn rerun_manifest(path: &Path, out_dir: &Path) -> Result<RunOutcome, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    run_experiment(&manifest.spec, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    /// First row in increasing R; nothing to compare against.
    NotApplicable,
    /// The minimum reached is no farther from x0 than at the previous R.
    Observed,
    Violated,
    /// This row or the previous one has no usable final point.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub outcome: Option<RunOutcome>,
    pub error: Option<String>,
    /// Distance from x0 to the registered minimum reached.
    pub minimum_distance_from_x0: Option<f64>,
    pub larger_r_nearer_minimum: Monotonicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub id: String,
    pub case: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Each R is applied as `r * I`.
    pub r_values: Vec<f64>,
    /// Shared configuration; its weight is replaced per row.
    pub solver: SolverConfig,
}

impl SweepSpec {
    fn row_spec(&self, r: f64, dim: usize) -> ExperimentSpec {
        let mut cfg = self.solver.clone();
        cfg.weight = Matrix::scaled_identity(dim, r);
        ExperimentSpec {
            id: format!("{}_r{}", self.id, r),
            case: self.case.clone(),
            x0: self.x0.clone(),
            method: MethodSpec::Oc(cfg),
            seed: None,
            target: None,
        }
    }
}

/// Runs one OC solve per R concurrently and tabulates which minimum each
/// reaches. Rows come back in the order of `r_values`; when `out_dir` is
/// given every row also writes its CSV and manifest.
pub fn r_sweep(sweep: &SweepSpec, out_dir: Option<&Path>) -> Result<Vec<SweepRow>, HarnessError> {
    let case = registry_get(&sweep.case)?;
    if sweep.r_values.is_empty() {
        return Err(HarnessError::InvalidSpec("empty R list".into()));
    }
    let dim = case.objective.dim();
    let x0 = sweep.x0.clone().unwrap_or_else(|| case.x0.clone());
    let specs: Vec<ExperimentSpec> = sweep.r_values.iter().map(|&r| sweep.row_spec(r, dim)).collect();

    let results: Vec<Result<RunOutcome, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                s.spawn(move || -> Result<RunOutcome, HarnessError> {
                    let done = execute(spec)?;
                    if let Some(dir) = out_dir {
                        write_run(&done, dir)?;
                    }
                    Ok(done.outcome)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let mut rows = Vec::with_capacity(results.len());
    for (r, res) in sweep.r_values.iter().zip(results) {
        let (outcome, error) = match res {
            Ok(o) => (Some(o), None),
            Err(e @ HarnessError::Io { .. }) => return Err(e),
            Err(e) => (None, Some(e.to_string())),
        };
        let minimum_distance_from_x0 = outcome
            .as_ref()
            .and_then(|o| o.nearest_minimum.as_ref())
            .map(|m| dist2(&m.reported, &x0));
        rows.push(SweepRow {
            r: *r,
            outcome,
            error,
            minimum_distance_from_x0,
            larger_r_nearer_minimum: Monotonicity::NotApplicable,
        });
    }
    annotate_monotonicity(&mut rows);
    Ok(rows)
}

fn annotate_monotonicity(rows: &mut [SweepRow]) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].r.total_cmp(&rows[b].r));
    for w in order.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        rows[hi].larger_r_nearer_minimum = match (
            rows[lo].minimum_distance_from_x0,
            rows[hi].minimum_distance_from_x0,
        ) {
            (Some(d_lo), Some(d_hi)) if d_hi <= d_lo => Monotonicity::Observed,
            (Some(_), Some(_)) => Monotonicity::Violated,
            _ => Monotonicity::Unknown,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    /// The restricted solve must converge.
    Residual,
    /// The phase ends at the first trajectory state within `radius` of
    /// `point`, and the next phase starts there.
    Waypoint {
        point: Vec<f64>,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// Whatever the restricted solve ends with is accepted.
    MaxOuter,
}

fn default_radius() -> f64 {
    DEFAULT_WAYPOINT_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Per-coordinate flag; inactive coordinates stay frozen.
    pub active: Vec<bool>,
    /// Its weight covers the active coordinates only.
    pub solver: SolverConfig,
    pub stop: StopRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub id: String,
    pub case: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub phases: Vec<Phase>,
    /// Registered minimum the schedule is expected to reach.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl PhaseSchedule {
    pub fn validate(&self, dim: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.phases.is_empty() {
            return bad("schedule has no phases".into());
        }
        for (p, phase) in self.phases.iter().enumerate() {
            if phase.active.len() != dim {
                return bad(format!("phase {p}: mask has {} entries, expected {dim}", phase.active.len()));
            }
            let n_active = phase.active.iter().filter(|&&a| a).count();
            if n_active == 0 {
                return bad(format!("phase {p}: no active coordinate"));
            }
            if phase.solver.weight.dim() != n_active {
                return bad(format!(
                    "phase {p}: weight is {0}x{0}, {n_active} coordinates active",
                    phase.solver.weight.dim()
                ));
            }
            spd_check(&phase.solver.weight, WEIGHT_SYM_TOL).map_err(SolverError::from)?;
            phase.solver.validate()?;
            if let StopRule::Waypoint { point, radius } = &phase.stop {
                if point.len() != dim || !(*radius > 0.0) {
                    return bad(format!("phase {p}: waypoint needs {dim} components and a positive radius"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub phase: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub termination: Termination,
    pub outer_iters: usize,
    /// Row of the concatenated series where this phase starts.
    pub first_row: usize,
    pub stop_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub id: String,
    pub case: String,
    pub completed: bool,
    pub final_point: Vec<f64>,
    pub nearest_minimum: Option<NearestMinimum>,
    pub phases: Vec<PhaseOutcome>,
    pub failure: Option<String>,
}

/// Runs the phases one after another, each solving the FBDEs over its active
/// coordinates from where the previous phase ended. A phase that misses its
/// stop rule aborts the schedule; the series up to that point is kept.
pub fn run_schedule(
    sched: &PhaseSchedule,
) -> Result<(ScheduleOutcome, Vec<SeriesRow>), HarnessError> {
    let case = registry_get(&sched.case)?;
    let dim = case.objective.dim();
    sched.validate(dim)?;
    let x0 = sched.x0.clone().unwrap_or_else(|| case.x0.clone());
    if x0.len() != dim {
        return Err(HarnessError::InvalidSpec("x0 dimension".into()));
    }

    let mut points: Vec<Vec<f64>> = vec![x0.clone()];
    let mut controls: Vec<Vec<f64>> = Vec::new();
    let mut phases = Vec::new();
    let mut failure = None;
    let mut current = x0;

    for (p, phase) in sched.phases.iter().enumerate() {
        let active: Vec<usize> = (0..dim).filter(|&i| phase.active[i]).collect();
        let obj = case.objective.restricted(&active, &current);
        let start: Vec<f64> = active.iter().map(|&i| current[i]).collect();
        let rep = ocsolver::solve(&obj, &start, &phase.solver)?;
        let embed = |y: &[f64], base: &[f64]| {
            let mut x = base.to_vec();
            for (&i, &v) in active.iter().zip(y) {
                x[i] = v;
            }
            x
        };
        let states: Vec<Vec<f64>> = rep.trajectory.states.iter().map(|y| embed(y, &current)).collect();
        let zero = vec![0.0; dim];
        let ctrls: Vec<Vec<f64>> = rep.trajectory.controls.iter().map(|u| embed(u, &zero)).collect();

        let (end_idx, satisfied, why) = match &phase.stop {
            StopRule::Residual => (
                states.len() - 1,
                rep.converged(),
                format!("phase {p} did not converge ({:?})", rep.termination),
            ),
            StopRule::MaxOuter => (
                states.len() - 1,
                rep.termination != Termination::NumericalError,
                format!("phase {p} hit a numerical error"),
            ),
            StopRule::Waypoint { point, radius } => {
                match states.iter().position(|x| dist2(x, point) <= *radius) {
                    Some(j) if rep.termination != Termination::NumericalError => (j, true, String::new()),
                    _ => (
                        states.len() - 1,
                        false,
                        format!("phase {p} never came within {radius} of {point:?}"),
                    ),
                }
            }
        };

        let first_row = points.len() - 1;
        points.extend(states[1..=end_idx].iter().cloned());
        controls.extend(ctrls[..end_idx].iter().cloned());
        current = states[end_idx].clone();
        phases.push(PhaseOutcome {
            phase: p,
            start: states[0].clone(),
            end: current.clone(),
            termination: rep.termination,
            outer_iters: rep.outer_iters,
            first_row,
            stop_satisfied: satisfied,
        });
        if !satisfied {
            failure = Some(why);
            break;
        }
    }

    let nearest_minimum = case.nearest_minimum(&current).map(|(i, d)| NearestMinimum {
        index: i,
        reported: case.minima[i].reported.clone(),
        distance: d,
    });
    let target = pick_target(&case, sched.target, &current);
    let (errs, _) = relative_error_series(&points, &case.minima[target].refined);
    let n_ctrl = controls.len();
    let series = points
        .into_iter()
        .zip(errs)
        .enumerate()
        .map(|(k, (x, err))| SeriesRow {
            k,
            x,
            u: (k < n_ctrl).then(|| controls[k].clone()),
            err,
        })
        .collect();
    Ok((
        ScheduleOutcome {
            id: sched.id.clone(),
            case: case.name.clone(),
            completed: failure.is_none(),
            final_point: current,
            nearest_minimum,
            phases,
            failure,
        },
        series,
    ))
}

pub fn write_schedule(
    sched: &PhaseSchedule,
    outcome: &ScheduleOutcome,
    series: &[SeriesRow],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let csv_path = out_dir.join(format!("{}.csv", sched.id));
    let json_path = out_dir.join(format!("{}.json", sched.id));
    let dim = outcome.final_point.len();
    write_file(&csv_path, &series_csv(series, dim))?;
    let manifest = serde_json::json!({
        "tool": "pmpopt",
        "version": env!("CARGO_PKG_VERSION"),
        "schedule": sched,
        "outcome": outcome,
        "csv": csv_path.file_name().unwrap().to_string_lossy(),
    });
    write_file(&json_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(vec![csv_path, json_path])
}

/// The OC configuration shared by the bundled reproductions.
pub fn default_oc(weight: Matrix) -> SolverConfig {
    SolverConfig::new(100, weight, 1e-4)
        .with_max_outer(1_000_000)
        .with_step_rule(StepRule::adaptive())
}

pub fn default_baseline(eta: f64) -> BaselineConfig {
    BaselineConfig::new(eta).with_max_iters(1_000_000)
}

pub const FIGURES: [&str; 13] = [
    "fig3", "fig2", "fig_f3", "fig4a", "fig4b", "fig4c", "fig6", "fig_f5", "fig7", "fig13",
    "fig14a", "fig14b", "fig14c",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// State against step index.
    Trajectory,
    /// Error against step index, log scale.
    Error,
    /// Second coordinate against the first.
    Plane,
}

#[derive(Debug, Clone, Default)]
pub struct FigurePlan {
    pub runs: Vec<ExperimentSpec>,
    pub sweep: Option<SweepSpec>,
    pub schedule: Option<PhaseSchedule>,
}

fn r1(r: f64) -> Matrix {
    Matrix::scaled_identity(1, r)
}

fn oc(id: &str, case: &str, weight: Matrix) -> ExperimentSpec {
    ExperimentSpec::new(id, case, MethodSpec::Oc(default_oc(weight)))
}

fn gd(id: &str, case: &str, eta: f64) -> ExperimentSpec {
    ExperimentSpec::new(id, case, MethodSpec::Gd(default_baseline(eta)))
}

fn nt(id: &str, case: &str) -> ExperimentSpec {
    ExperimentSpec::new(id, case, MethodSpec::Newton(default_baseline(1.0).with_max_iters(100)))
}

fn f8_schedule(id: &str, r1_weight: f64, waypoint: [f64; 2], second: Matrix, target: usize) -> PhaseSchedule {
    let phase_solver = |w: Matrix| default_oc(w).with_max_outer(200_000);
    PhaseSchedule {
        id: id.into(),
        case: "f8".into(),
        x0: None,
        phases: vec![
            Phase {
                active: vec![false, true],
                solver: phase_solver(r1(r1_weight)),
                stop: StopRule::Waypoint {
                    point: waypoint.to_vec(),
                    radius: DEFAULT_WAYPOINT_RADIUS,
                },
            },
            Phase {
                active: vec![true, true],
                solver: default_oc(second),
                stop: StopRule::Residual,
            },
        ],
        target: Some(target),
    }
}

pub fn figure_plan(figure: &str) -> Result<(FigurePlan, PlotKind), HarnessError> {
    let mut plan = FigurePlan::default();
    let kind = match figure {
        "fig3" => {
            plan.runs = vec![
                oc("f1_oc_r1", "f1", r1(1.0)),
                oc("f1_oc_r200", "f1", r1(200.0)),
                oc("f1_oc_r0.01", "f1", r1(0.01)),
            ];
            PlotKind::Trajectory
        }
        "fig2" => {
            plan.runs = vec![
                oc("f2_oc_r0.01", "f2", r1(0.01)),
                gd("f2_gd_eta0.1", "f2", 0.1),
                nt("f2_newton", "f2"),
            ];
            PlotKind::Trajectory
        }
        "fig_f3" => {
            plan.runs = vec![
                oc("f3_oc_r0.01", "f3", r1(0.01)),
                gd("f3_gd_eta0.01", "f3", 0.01),
                nt("f3_newton", "f3"),
            ];
            PlotKind::Trajectory
        }
        "fig4a" | "fig4b" | "fig4c" => {
            let (case, eta) = match figure {
                "fig4a" => ("f1", 0.001),
                "fig4b" => ("f2", 0.1),
                _ => ("f3", 0.01),
            };
            plan.runs = vec![
                oc(&format!("{case}_err_oc_r0.01"), case, r1(0.01)).with_target(0),
                gd(&format!("{case}_err_gd_eta{eta}"), case, eta).with_target(0),
            ];
            PlotKind::Error
        }
        "fig6" => {
            let flat = |id: &str, method: MethodSpec| ExperimentSpec::new(id, "f4", method).with_target(0);
            let fixed = default_baseline(0.026).with_max_iters(100).with_grad_tol(0.0);
            plan.runs = vec![
                oc("f4_oc_r38.46", "f4", r1(1.0 / 0.026)).with_target(0),
                flat("f4_gd_eta0.026", MethodSpec::Gd(fixed.clone())),
                flat("f4_newton", MethodSpec::Newton(fixed)),
            ];
            PlotKind::Trajectory
        }
        "fig_f5" => {
            plan.sweep = Some(SweepSpec {
                id: "f5_sweep".into(),
                case: "f5".into(),
                x0: None,
                r_values: vec![100.0, 0.1],
                solver: default_oc(r1(1.0)),
            });
            PlotKind::Trajectory
        }
        "fig7" => {
            plan.sweep = Some(SweepSpec {
                id: "f6_sweep".into(),
                case: "f6".into(),
                x0: None,
                r_values: vec![1.0, 200.0, 500.0],
                solver: default_oc(r1(1.0)),
            });
            PlotKind::Trajectory
        }
        "fig13" => {
            let mut cfg = default_oc(Matrix::scaled_identity(2, 1.0 / 0.12));
            // y^4 is flat near 0; a longer horizon lets the y coordinate settle
            cfg.horizon = 200;
            plan.runs = vec![
                ExperimentSpec::new("f7_oc_r8.33", "f7", MethodSpec::Oc(cfg)).with_target(0),
                gd("f7_gd_eta0.12", "f7", 0.12).with_target(0),
            ];
            PlotKind::Plane
        }
        "fig14a" => {
            plan.schedule = Some(f8_schedule("f8_schedule_a", 1.0, [-20.0, 11.0], Matrix::identity(2), 2));
            PlotKind::Plane
        }
        "fig14b" => {
            let mut sched = f8_schedule(
                "f8_schedule_b",
                1.0,
                [-20.0, 11.0],
                Matrix::diagonal(&[100.0, 1e-5]),
                1,
            );
            // With a 1e7 spread in R the residual test is out of reach within
            // any practical budget; the phase runs a fixed number of sweeps.
            sched.phases[1].solver.max_outer = 200_000;
            sched.phases[1].stop = StopRule::MaxOuter;
            plan.schedule = Some(sched);
            PlotKind::Plane
        }
        "fig14c" => {
            plan.schedule = Some(f8_schedule("f8_schedule_c", 100.0, [-20.0, 35.0], Matrix::identity(2), 0));
            PlotKind::Plane
        }
        other => return Err(HarnessError::UnknownFigure(other.into())),
    };
    Ok((plan, kind))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureReport {
    pub figure: String,
    pub runs: Vec<RunOutcome>,
    pub sweep: Option<Vec<SweepRow>>,
    pub schedule: Option<ScheduleOutcome>,
    pub files: Vec<PathBuf>,
}

/// A gnuplot script drawing every series of one figure.
pub fn plot_script(figure: &str, kind: PlotKind, series: &[(String, usize)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {figure}: gnuplot -p {figure}.gp");
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set title '{figure}'");
    let _ = writeln!(s, "set key outside");
    let lines: Vec<String> = series
        .iter()
        .map(|(stem, dim)| match kind {
            PlotKind::Trajectory => format!("'{stem}.csv' every ::1 using 1:2 with linespoints title '{stem}'"),
            PlotKind::Error => {
                let col = 2 + 2 * dim;
                format!("'{stem}.csv' every ::1 using 1:(abs(${col})) with lines title '{stem}'")
            }
            PlotKind::Plane => format!("'{stem}.csv' every ::1 using 2:3 with linespoints title '{stem}'"),
        })
        .collect();
    match kind {
        PlotKind::Trajectory => {
            let _ = writeln!(s, "set xlabel 'k'\nset ylabel 'x_k'");
        }
        PlotKind::Error => {
            let _ = writeln!(s, "set xlabel 'k'\nset ylabel '|relative error|'\nset logscale y");
        }
        PlotKind::Plane => {
            let _ = writeln!(s, "set xlabel 'x'\nset ylabel 'y'");
        }
    }
    let _ = writeln!(s, "plot {}", lines.join(", \\\n     "));
    s
}

/// Runs everything a figure needs and writes its artifacts under `out_dir`.
pub fn repro(figure: &str, out_dir: &Path) -> Result<FigureReport, HarnessError> {
    let (plan, kind) = figure_plan(figure)?;
    let mut files = Vec::new();
    let mut plotted = Vec::new();

    let executed: Vec<Result<Executed, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = plan.runs.iter().map(|spec| s.spawn(move || execute(spec))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run worker panicked"))
            .collect()
    });
    let mut runs = Vec::new();
    for done in executed {
        let done = done?;
        files.extend(write_run(&done, out_dir)?);
        plotted.push((done.spec.id.clone(), done.outcome.x0.len()));
        runs.push(done.outcome);
    }

    let sweep = match &plan.sweep {
        Some(sw) => {
            let rows = r_sweep(sw, Some(out_dir))?;
            for row in &rows {
                if let Some(o) = &row.outcome {
                    files.push(out_dir.join(format!("{}.csv", o.id)));
                    files.push(out_dir.join(format!("{}.json", o.id)));
                    plotted.push((o.id.clone(), o.x0.len()));
                }
            }
            let table = out_dir.join(format!("{}.json", sw.id));
            write_file(&table, &serde_json::to_string_pretty(&rows)?)?;
            files.push(table);
            Some(rows)
        }
        None => None,
    };

    let schedule = match &plan.schedule {
        Some(sched) => {
            let (outcome, series) = run_schedule(sched)?;
            files.extend(write_schedule(sched, &outcome, &series, out_dir)?);
            plotted.push((sched.id.clone(), outcome.final_point.len()));
            Some(outcome)
        }
        None => None,
    };

    let gp = out_dir.join(format!("{figure}.gp"));
    write_file(&gp, &plot_script(figure, kind, &plotted))?;
    files.push(gp);

    Ok(FigureReport {
        figure: figure.into(),
        runs,
        sweep,
        schedule,
        files,
    })
}

/// Reproduces several figures concurrently, then writes `index.json` once.
pub fn repro_many(figures: &[&str], out_dir: &Path) -> Result<Vec<FigureReport>, HarnessError> {
    for f in figures {
        figure_plan(f)?;
    }
    let reports: Vec<Result<FigureReport, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = figures.iter().map(|f| s.spawn(move || repro(f, out_dir))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("figure worker panicked"))
            .collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    let index: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "figure": r.figure,
                "files": r.files.iter()
                    .map(|p| p.strip_prefix(out_dir).unwrap_or(p).to_string_lossy().into_owned())
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    write_file(
        &out_dir.join("index.json"),
        &serde_json::to_string_pretty(&serde_json::json!({ "figures": index }))?,
    )?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        let (e, m) = relative_error_series(&[vec![-1.2], vec![-0.6]], &[-0.6]);
        assert_eq!(e, vec![vec![1.0], vec![0.0]]);
        assert_eq!(m, vec![ErrorMode::Relative]);
        let (e, m) = relative_error_series(&[vec![0.3, 2.0]], &[0.0, 1.0]);
        assert_eq!(e, vec![vec![0.3, 1.0]]);
        assert_eq!(m, vec![ErrorMode::Absolute, ErrorMode::Relative]);
    }

    #[test]
    fn oscillation_examples() {
        let pts = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        assert_eq!(oscillation_metric(&pts(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), 0.0), 0);
        // tail is [1, -1, 1, -1]: increments -2, +2, -2
        assert_eq!(oscillation_metric(&pts(&[9.0, 9.0, 9.0, 9.0, 1.0, -1.0, 1.0, -1.0]), 0.0), 2);
        assert_eq!(oscillation_metric(&pts(&[0.0, 0.0, 1e-13, 0.0]), 1e-12), 0);
    }

    #[test]
    fn monotonicity_annotation() {
        let row = |r: f64, d: Option<f64>| SweepRow {
            r,
            outcome: None,
            error: None,
            minimum_distance_from_x0: d,
            larger_r_nearer_minimum: Monotonicity::NotApplicable,
        };
        let mut rows = vec![row(100.0, Some(9.0)), row(0.1, Some(8.9)), row(500.0, None)];
        annotate_monotonicity(&mut rows);
        assert_eq!(rows[1].larger_r_nearer_minimum, Monotonicity::NotApplicable);
        assert_eq!(rows[0].larger_r_nearer_minimum, Monotonicity::Violated);
        assert_eq!(rows[2].larger_r_nearer_minimum, Monotonicity::Unknown);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            SeriesRow {
                k: 0,
                x: vec![1.0],
                u: Some(vec![-0.5]),
                err: vec![1.0],
            },
            SeriesRow {
                k: 1,
                x: vec![0.5],
                u: None,
                err: vec![1e-12],
            },
        ];
        assert_eq!(series_csv(&rows, 1), "k,x_0,u_0,err_0\n0,1,-0.5,1\n1,0.5,,1e-12\n");
    }

    #[test]
    fn quadratic_gd_errors_halve() {
        let spec = ExperimentSpec::new(
            "q",
            "quadratic",
            MethodSpec::Gd(BaselineConfig::new(0.5).with_max_iters(5).with_grad_tol(0.0)),
        )
        .with_x0(vec![1.0]);
        let done = execute(&spec).unwrap();
        // target 0 is near-zero, so errors are absolute
        let errs: Vec<f64> = done.series.iter().map(|r| r.err[0]).collect();
        assert_eq!(errs, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert_eq!(done.outcome.error_modes, vec![ErrorMode::Absolute]);
    }

    #[test]
    fn single_r_sweep_on_quadratic() {
        let sweep = SweepSpec {
            id: "q".into(),
            case: "quadratic".into(),
            x0: None,
            r_values: vec![1.0],
            solver: SolverConfig::new(10, r1(1.0), 0.01),
        };
        let rows = r_sweep(&sweep, None).unwrap();
        assert_eq!(rows.len(), 1);
        let o = rows[0].outcome.as_ref().unwrap();
        assert_eq!(o.nearest_minimum.as_ref().unwrap().index, 0);
        assert!(o.final_point[0].abs() < 1e-3);
    }

    #[test]
    fn spec_validation() {
        let bad_case = ExperimentSpec::new("x", "f99", MethodSpec::Gd(BaselineConfig::new(0.1)));
        assert!(matches!(execute(&bad_case), Err(HarnessError::UnknownCase(_))));
        let bad_dim = ExperimentSpec::new("x", "f7", MethodSpec::Oc(SolverConfig::new(5, r1(1.0), 0.1)));
        assert!(matches!(execute(&bad_dim), Err(HarnessError::InvalidSpec(_))));
        assert!(matches!(figure_plan("fig99"), Err(HarnessError::UnknownFigure(_))));
    }

    #[test]
    fn schedule_validation() {
        let mut s = f8_schedule("s", 1.0, [-20.0, 11.0], Matrix::identity(2), 2);
        s.phases[0].active = vec![false, false];
        assert!(run_schedule(&s).is_err());
        let mut s = f8_schedule("s", 1.0, [-20.0, 11.0], Matrix::identity(2), 2);
        s.phases[1].solver.weight = Matrix::identity(1);
        assert!(run_schedule(&s).is_err());
    }

    #[test]
    fn every_figure_has_a_plan() {
        for f in FIGURES {
            let (plan, _) = figure_plan(f).unwrap();
            assert!(!plan.runs.is_empty() || plan.sweep.is_some() || plan.schedule.is_some());
        }
    }
}
