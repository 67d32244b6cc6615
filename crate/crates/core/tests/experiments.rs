use std::fs;

use pmpopt::baselines::BaselineConfig;
use pmpopt::harness::{
    default_oc, execute, figure_plan, r_sweep, repro_many, rerun_manifest, run_experiment,
    run_schedule, ErrorMode, ExperimentSpec, MethodSpec, Monotonicity, Phase, PhaseSchedule,
    RunStatus, StopRule, SweepSpec,
};
use pmpopt::numerics::{dist2, Matrix};
use pmpopt::ocsolver::{InitControl, SolverConfig, Termination};

#[test]
fn csv_and_manifest_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(
        "f7_gd",
        "f7",
        MethodSpec::Gd(BaselineConfig::new(0.12).with_max_iters(50).with_grad_tol(0.0)),
    );
    let outcome = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(outcome.status, RunStatus::MaxIters);

    let csv = fs::read_to_string(dir.path().join("f7_gd.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,x_0,x_1,u_0,u_1,err_0,err_1");
    assert_eq!(lines.len(), 52);
    assert!(lines[1].starts_with("0,2,-2,"));
    assert_eq!(lines[51].split(',').filter(|f| f.is_empty()).count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("f7_gd.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["case"], "f7");
    assert_eq!(manifest["effective_method"]["config"]["eta"], 0.12);
    assert_eq!(manifest["outcome"]["status"], "max_iters");
    assert_eq!(manifest["outcome"]["error_modes"], serde_json::json!(["relative", "absolute"]));
}

#[test]
fn manifests_reproduce_their_runs() {
    let dir = tempfile::tempdir().unwrap();
    let again = tempfile::tempdir().unwrap();
    let mut random = default_oc(Matrix::identity(1)).with_init(InitControl::Random { scale: 0.1, seed: 0 });
    random.horizon = 30;
    let specs = [
        ExperimentSpec::new("f1_r200", "f1", MethodSpec::Oc(default_oc(Matrix::diagonal(&[200.0])))),
        ExperimentSpec {
            seed: Some(42),
            ..ExperimentSpec::new("q_random", "quadratic", MethodSpec::Oc(random))
        },
    ];
    for spec in &specs {
        let first = run_experiment(spec, dir.path()).unwrap();
        let second = rerun_manifest(&dir.path().join(format!("{}.json", spec.id)), again.path()).unwrap();
        assert_eq!(first, second);
        let a = fs::read(dir.path().join(format!("{}.csv", spec.id))).unwrap();
        let b = fs::read(again.path().join(format!("{}.csv", spec.id))).unwrap();
        assert_eq!(a, b, "{}", spec.id);
    }
    let manifest = fs::read_to_string(dir.path().join("q_random.json")).unwrap();
    assert!(manifest.contains("\"seed\": 42"));
}

#[test]
fn f1_larger_weight_plateaus_later() {
    let run = |r: f64| {
        execute(&ExperimentSpec::new("f1", "f1", MethodSpec::Oc(default_oc(Matrix::diagonal(&[r])))))
            .unwrap()
            .outcome
    };
    let (small, large) = (run(1.0), run(200.0));
    for o in [&small, &large] {
        assert_eq!(o.status, RunStatus::Converged);
        assert!((o.final_point[0] + 0.592).abs() <= 1e-2);
    }
    assert!(large.steps_to_plateau.unwrap() > small.steps_to_plateau.unwrap());
}

#[test]
fn non_finite_rows_are_truncated() {
    // eta * grad f1(10) overflows on the first step
    let mut cfg = BaselineConfig::new(1e306).with_max_iters(50);
    cfg.divergence_radius = f64::INFINITY;
    let done = execute(&ExperimentSpec::new("f1_gd", "f1", MethodSpec::Gd(cfg))).unwrap();
    assert_eq!(done.outcome.status, RunStatus::Diverged);
    let k = done.outcome.truncated_at.unwrap();
    assert_eq!(done.series.len(), k);
    assert!(done.series.iter().all(|r| r.x.iter().all(|v| v.is_finite())));
}

#[test]
fn sweep_rows_follow_input_order_and_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = SweepSpec {
        id: "f6".into(),
        case: "f6".into(),
        x0: None,
        r_values: vec![500.0, 1.0],
        solver: default_oc(Matrix::identity(1)),
    };
    let rows = r_sweep(&sweep, Some(dir.path())).unwrap();
    assert_eq!(rows[0].r, 500.0);
    assert_eq!(rows[1].larger_r_nearer_minimum, Monotonicity::NotApplicable);
    assert_eq!(rows[0].larger_r_nearer_minimum, Monotonicity::Observed);
    let minima: Vec<usize> = rows
        .iter()
        .map(|r| r.outcome.as_ref().unwrap().nearest_minimum.as_ref().unwrap().index)
        .collect();
    assert_eq!(minima, vec![2, 0]);
    assert!(dir.path().join("f6_r500.csv").exists());
    assert!(dir.path().join("f6_r1.json").exists());
}

#[test]
fn zero_minimum_uses_absolute_error() {
    let mut spec = ExperimentSpec::new("f6", "f6", MethodSpec::Oc(default_oc(Matrix::diagonal(&[200.0]))))
        .with_target(1);
    if let MethodSpec::Oc(cfg) = &mut spec.method {
        cfg.max_outer = 1000;
    }
    let done = execute(&spec).unwrap();
    assert_eq!(done.outcome.error_modes, vec![ErrorMode::Absolute]);
    assert_eq!(done.series[0].err, vec![-3.0]);
}

#[test]
fn waypoint_phase_ends_inside_its_radius() {
    let (plan, _) = figure_plan("fig14a").unwrap();
    let sched = plan.schedule.unwrap();
    let (outcome, series) = run_schedule(&sched).unwrap();
    assert!(outcome.completed);
    let StopRule::Waypoint { point, radius } = &sched.phases[0].stop else {
        panic!("first phase should stop at a waypoint");
    };
    let first = &outcome.phases[0];
    assert!(dist2(&first.end, point) <= *radius);
    assert_eq!(first.start[0], -20.0);
    assert_eq!(first.end[0], -20.0);
    // the frozen coordinate never moves during the first phase
    let boundary = outcome.phases[1].first_row;
    assert!(series[..=boundary].iter().all(|r| r.x[0] == -20.0));
    assert_eq!(series[boundary].x, first.end);
    assert!(dist2(&outcome.final_point, &[9.93, 9.99]) <= 0.2);
}

#[test]
fn unreachable_waypoint_aborts_with_partial_output() {
    let sched = PhaseSchedule {
        id: "lost".into(),
        case: "f8".into(),
        x0: None,
        phases: vec![
            Phase {
                active: vec![false, true],
                solver: SolverConfig::new(20, Matrix::identity(1), 1e-3).with_max_outer(200),
                stop: StopRule::Waypoint {
                    point: vec![-20.0, -100.0],
                    radius: 0.5,
                },
            },
            Phase {
                active: vec![true, true],
                solver: default_oc(Matrix::identity(2)),
                stop: StopRule::Residual,
            },
        ],
        target: None,
    };
    let (outcome, series) = run_schedule(&sched).unwrap();
    assert!(!outcome.completed);
    assert_eq!(outcome.phases.len(), 1);
    assert!(!outcome.phases[0].stop_satisfied);
    assert!(outcome.failure.unwrap().contains("never came within"));
    assert_eq!(series.len(), 22);
}

#[test]
fn repro_writes_artifacts_and_a_single_index() {
    let dir = tempfile::tempdir().unwrap();
    let reports = repro_many(&["fig6"], dir.path()).unwrap();
    let report = &reports[0];
    let oc = &report.runs[0];
    assert_eq!(oc.status, RunStatus::Converged);
    assert!((oc.final_point[0] + 1.566).abs() <= 1e-2);
    for flat in &report.runs[1..] {
        assert_eq!(flat.final_point, vec![0.0]);
        assert_eq!(flat.rows, 101);
    }
    assert!(report.runs[2].singular_hessian_events > 0);

    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    let files = index["figures"][0]["files"].as_array().unwrap();
    assert_eq!(files.len(), report.files.len());
    for f in files {
        assert!(dir.path().join(f.as_str().unwrap()).exists());
    }
    let gp = fs::read_to_string(dir.path().join("fig6.gp")).unwrap();
    assert!(gp.contains("'f4_newton.csv'"));
}

#[test]
fn bundled_plans_use_the_published_parameters() {
    let weight = |spec: &ExperimentSpec| match &spec.method {
        MethodSpec::Oc(c) => c.weight.get(0, 0),
        _ => f64::NAN,
    };
    let eta = |spec: &ExperimentSpec| match &spec.method {
        MethodSpec::Gd(c) => c.eta,
        _ => f64::NAN,
    };
    let (fig6, _) = figure_plan("fig6").unwrap();
    assert_eq!(weight(&fig6.runs[0]), 1.0 / 0.026);
    assert_eq!(eta(&fig6.runs[1]), 0.026);
    let (fig4b, _) = figure_plan("fig4b").unwrap();
    assert_eq!((weight(&fig4b.runs[0]), eta(&fig4b.runs[1])), (0.01, 0.1));
    let (fig13, _) = figure_plan("fig13").unwrap();
    assert_eq!(weight(&fig13.runs[0]), 1.0 / 0.12);
    assert_eq!(eta(&fig13.runs[1]), 0.12);
    let (fig7, _) = figure_plan("fig7").unwrap();
    assert_eq!(fig7.sweep.unwrap().r_values, vec![1.0, 200.0, 500.0]);
    let (fig14b, _) = figure_plan("fig14b").unwrap();
    let s = fig14b.schedule.unwrap();
    assert_eq!(s.phases[1].solver.weight, Matrix::diagonal(&[100.0, 1e-5]));
    assert_eq!(s.phases[0].stop, StopRule::Waypoint { point: vec![-20.0, 11.0], radius: 0.5 });
}

#[test]
fn oc_termination_reported_for_bad_step() {
    let spec = ExperimentSpec::new(
        "f1_fixed",
        "f1",
        MethodSpec::Oc(SolverConfig::new(100, Matrix::identity(1), 1e-3)),
    );
    let done = execute(&spec).unwrap();
    assert_eq!(done.outcome.status, RunStatus::NumericalError);
    assert_eq!(done.solve.unwrap().termination, Termination::NumericalError);
    assert!(done.outcome.failure.is_some());
}
