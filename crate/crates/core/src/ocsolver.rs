//! Minimization through a discrete-time optimal control problem.
//!
//! The single integrator `x_{k+1} = x_k + u_k` is driven from a fixed `x_0`
//! by controls `u_0..u_N` chosen to minimize
//!
//! ```text
//! J = sum_{k=0}^{N} [ f(x_k) + u_k^T R u_k / 2 ] + f(x_{N+1})
//! ```
//!
//! Stationarity of `J` is expressed through the forward-backward difference
//! equations: the forward rollout of the states, the backward costate
//! recursion `lambda_k = grad f(x_k) + lambda_{k+1}` with
//! `lambda_{N+1} = grad f(x_{N+1})`, and the equilibrium condition
//! `R u_k + lambda_{k+1} = 0`. [`solve`] iterates gradient steps on the whole
//! control sequence until the equilibrium residual vanishes; the terminal
//! state `x_{N+1}` of the converged trajectory approximates a local minimizer
//! of `f`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{norm2, spd_check, Cholesky, Matrix, SpdError};
use crate::objective::{Objective, ObjectiveError};

/// Symmetry tolerance applied to the control weight.
pub const WEIGHT_SYM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("control weight rejected: {0}")]
    Weight(#[from] SpdError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("gradient failed at state index {k}: {source}")]
    Gradient { k: usize, source: ObjectiveError },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite value in {stage} at index {k}")]
    NonFinite { stage: &'static str, k: usize },
}

/// A fixed-length sequence of equally sized vectors, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Sequence {
    dim: usize,
    data: Vec<f64>,
}

impl Sequence {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * len],
        }
    }

    pub fn constant(dim: usize, len: usize, value: f64) -> Self {
        Self {
            dim,
            data: vec![value; dim * len],
        }
    }

    /// Panics if the vectors differ in length or the list is empty.
    pub fn from_vecs(vecs: &[Vec<f64>]) -> Self {
        Self::try_from(vecs.to_vec()).expect("vectors must be non-empty and equally sized")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.get(self.len() - 1)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.iter().map(|v| v.to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

impl TryFrom<Vec<Vec<f64>>> for Sequence {
    type Error = String;

    fn try_from(vecs: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let dim = vecs.first().map(Vec::len).ok_or("empty sequence")?;
        if dim == 0 || vecs.iter().any(|v| v.len() != dim) {
            return Err("sequence vectors must share a positive dimension".into());
        }
        Ok(Self {
            dim,
            data: vecs.into_iter().flatten().collect(),
        })
    }
}

impl From<Sequence> for Vec<Vec<f64>> {
    fn from(s: Sequence) -> Self {
        s.to_vecs()
    }
}

/// Initial control sequence `u^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitControl {
    Zeros,
    /// Every component of every control set to `value`.
    Constant { value: f64 },
    Given { controls: Sequence },
    /// Components drawn uniformly from `[-scale, scale]`.
    Random { scale: f64, seed: u64 },
}

impl Default for InitControl {
    /// A small nonzero constant, so that a start at an exact stationary point
    /// of `f` still produces a nonzero gradient.
    fn default() -> Self {
        InitControl::Constant { value: 1e-3 }
    }
}

impl InitControl {
    pub fn materialize(&self, dim: usize, len: usize) -> Result<Sequence, SolverError> {
        match self {
            InitControl::Zeros => Ok(Sequence::zeros(dim, len)),
            InitControl::Constant { value } => Ok(Sequence::constant(dim, len, *value)),
            InitControl::Given { controls } => {
                if controls.dim() != dim || controls.len() != len {
                    return Err(SolverError::InvalidConfig(format!(
                        "given controls are {}x{}, expected {len}x{dim}",
                        controls.len(),
                        controls.dim()
                    )));
                }
                Ok(controls.clone())
            }
            InitControl::Random { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut s = Sequence::zeros(dim, len);
                for v in s.data.iter_mut() {
                    *v = rng.gen_range(-1.0..=1.0) * scale;
                }
                Ok(s)
            }
        }
    }
}

/// How the outer step size `alpha` evolves between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// `alpha` never changes.
    Fixed,
    /// Halve `alpha` whenever the cost would increase; never below
    /// `alpha * floor_ratio`, where the step is taken regardless.
    Halving { floor_ratio: f64 },
    /// Like `Halving`, and additionally multiply `alpha` by `grow` after every
    /// accepted step.
    Adaptive { grow: f64, floor_ratio: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Fixed
    }
}

impl StepRule {
    pub fn halving() -> Self {
        StepRule::Halving {
            floor_ratio: 1.0 / 1024.0,
        }
    }

    pub fn adaptive() -> Self {
        StepRule::Adaptive {
            grow: 1.05,
            floor_ratio: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// `N`: the controls are `u_0..u_N`, the states `x_0..x_{N+1}`.
    pub horizon: usize,
    pub weight: Matrix,
    pub alpha: f64,
    pub epsilon: f64,
    pub max_outer: usize,
    #[serde(default)]
    pub init_control: InitControl,
    #[serde(default)]
    pub step_rule: StepRule,
}

impl SolverConfig {
    pub fn new(horizon: usize, weight: Matrix, alpha: f64) -> Self {
        Self {
            horizon,
            weight,
            alpha,
            epsilon: 1e-6,
            max_outer: 50_000,
            init_control: InitControl::default(),
            step_rule: StepRule::Fixed,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_outer(mut self, max_outer: usize) -> Self {
        self.max_outer = max_outer;
        self
    }

    pub fn with_init(mut self, init: InitControl) -> Self {
        self.init_control = init;
        self
    }

    pub fn with_step_rule(mut self, rule: StepRule) -> Self {
        self.step_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive and finite");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive and finite");
        }
        match self.step_rule {
            StepRule::Fixed => {}
            StepRule::Halving { floor_ratio } => {
                if !(floor_ratio > 0.0 && floor_ratio <= 1.0) {
                    return bad("floor_ratio must lie in (0, 1]");
                }
            }
            StepRule::Adaptive { grow, floor_ratio } => {
                if !(floor_ratio > 0.0 && floor_ratio <= 1.0) {
                    return bad("floor_ratio must lie in (0, 1]");
                }
                if !(grow >= 1.0 && grow.is_finite()) {
                    return bad("grow must be at least 1");
                }
            }
        }
        if let InitControl::Random { scale, .. } = self.init_control {
            if !(scale >= 0.0 && scale.is_finite()) {
                return bad("random init scale must be finite and non-negative");
            }
        }
        spd_check(&self.weight, WEIGHT_SYM_TOL)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_0..x_{N+1}`
    pub states: Sequence,
    /// `u_0..u_N`
    pub controls: Sequence,
    /// `lambda_1..lambda_{N+1}`, stored from index 0.
    pub costates: Option<Sequence>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len() - 1
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last()
    }

    /// `lambda_k` for `k` in `1..=N+1`.
    pub fn costate(&self, k: usize) -> Option<&[f64]> {
        let c = self.costates.as_ref()?;
        (k >= 1 && k <= c.len()).then(|| c.get(k - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    NumericalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// `x_{N+1}` of the last finite iterate.
    pub final_state: Vec<f64>,
    pub trajectory: Trajectory,
    /// Number of control updates applied.
    pub outer_iters: usize,
    /// `max_k |R u_k + lambda_{k+1}|` of every evaluated iterate.
    pub residual_history: Vec<f64>,
    /// `J` of every evaluated iterate.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    /// Step size in effect when the solve stopped.
    pub final_alpha: f64,
    /// What went wrong, for `NumericalError`.
    pub failure: Option<String>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// `states[0] = x0`, `states[k+1] = states[k] + controls[k]`.
pub fn forward_rollout(x0: &[f64], controls: &Sequence) -> Result<Sequence, SolverError> {
    if controls.dim() != x0.len() {
        return Err(SolverError::Dimension {
            expected: x0.len(),
            got: controls.dim(),
        });
    }
    let mut states = Sequence::zeros(x0.len(), controls.len() + 1);
    match rollout_into(x0, controls, &mut states) {
        None => Ok(states),
        Some(k) => Err(SolverError::NonFinite {
            stage: "forward rollout",
            k,
        }),
    }
}

/// Returns the first non-finite state index, if any.
fn rollout_into(x0: &[f64], controls: &Sequence, states: &mut Sequence) -> Option<usize> {
    let n = x0.len();
    states.data[..n].copy_from_slice(x0);
    let mut bad = (!x0.iter().all(|v| v.is_finite())).then_some(0);
    for k in 0..controls.len() {
        let (done, rest) = states.data.split_at_mut((k + 1) * n);
        let prev = &done[k * n..];
        let u = controls.get(k);
        for i in 0..n {
            rest[i] = prev[i] + u[i];
        }
        if bad.is_none() && !rest[..n].iter().all(|v| v.is_finite()) {
            bad = Some(k + 1);
        }
    }
    bad
}

/// `lambda_{N+1} = grad f(x_{N+1})`, `lambda_k = grad f(x_k) + lambda_{k+1}`
/// for `k = N..1`. Index `j` of the result holds `lambda_{j+1}`.
pub fn backward_costates(obj: &Objective, states: &Sequence) -> Result<Sequence, SolverError> {
    if states.dim() != obj.dim() {
        return Err(SolverError::Dimension {
            expected: obj.dim(),
            got: states.dim(),
        });
    }
    if states.len() < 2 {
        return Err(SolverError::InvalidConfig(
            "a trajectory needs at least two states".into(),
        ));
    }
    let mut costates = Sequence::zeros(states.dim(), states.len() - 1);
    let mut grad = vec![0.0; states.dim()];
    costates_into(obj, states, &mut costates, &mut grad)?;
    Ok(costates)
}

fn costates_into(
    obj: &Objective,
    states: &Sequence,
    costates: &mut Sequence,
    grad: &mut [f64],
) -> Result<(), SolverError> {
    let n = states.dim();
    let last = states.len() - 1;
    for k in (1..=last).rev() {
        obj.grad_into(states.get(k), grad)
            .map_err(|source| SolverError::Gradient { k, source })?;
        let j = k - 1;
        if k == last {
            costates.get_mut(j).copy_from_slice(grad);
        } else {
            let (lo, hi) = costates.data.split_at_mut(k * n);
            let next = &hi[..n];
            for (i, c) in lo[j * n..].iter_mut().enumerate() {
                *c = grad[i] + next[i];
            }
        }
    }
    Ok(())
}

/// `dH/du_k = R u_k + lambda_{k+1}` for `k = 0..N`.
pub fn hamiltonian_gradient(
    weight: &Matrix,
    controls: &Sequence,
    costates: &Sequence,
) -> Result<Sequence, SolverError> {
    if controls.len() != costates.len() {
        return Err(SolverError::Dimension {
            expected: controls.len(),
            got: costates.len(),
        });
    }
    for d in [controls.dim(), costates.dim()] {
        if d != weight.dim() {
            return Err(SolverError::Dimension {
                expected: weight.dim(),
                got: d,
            });
        }
    }
    let mut g = Sequence::zeros(controls.dim(), controls.len());
    hamiltonian_gradient_into(weight, controls, costates, &mut g);
    Ok(g)
}

/// Writes `R u_k + lambda_{k+1}` and returns `max_k |.|_2`.
fn hamiltonian_gradient_into(
    weight: &Matrix,
    controls: &Sequence,
    costates: &Sequence,
    out: &mut Sequence,
) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..controls.len() {
        let g = out.get_mut(k);
        weight.mul_vec_into(controls.get(k), g);
        for (gi, li) in g.iter_mut().zip(costates.get(k)) {
            *gi += li;
        }
        let norm = norm2(g);
        // NaN must win the max
        worst = if norm.is_nan() { f64::NAN } else { worst.max(norm) };
    }
    worst
}

/// `J = sum_{k=0}^{N} [f(x_k) + u_k^T R u_k / 2] + f(x_{N+1})`.
pub fn cost_of(obj: &Objective, weight: &Matrix, traj: &Trajectory) -> Result<f64, SolverError> {
    if traj.states.len() != traj.controls.len() + 1 {
        return Err(SolverError::InvalidConfig(
            "trajectory needs one more state than controls".into(),
        ));
    }
    let mut j = 0.0;
    for x in traj.states.iter() {
        j += obj.eval(x)?;
    }
    for u in traj.controls.iter() {
        j += 0.5 * weight.quad_form(u);
    }
    Ok(j)
}

fn cost_unchecked(obj: &Objective, weight: &Matrix, states: &Sequence, controls: &Sequence) -> f64 {
    let f: f64 = states.iter().map(|x| obj.value_unchecked(x)).sum();
    let e: f64 = controls.iter().map(|u| weight.quad_form(u)).sum();
    f + 0.5 * e
}

/// Runs the outer iteration: roll the states forward, sweep the costates
/// backward, evaluate `dH/du` and step every control against it, until
/// `max_k |dH/du_k| < epsilon` or `max_outer` updates have been applied.
///
/// Configuration and dimension problems are errors. A non-finite value
/// during the iteration ends the solve with [`Termination::NumericalError`]
/// and the last finite iterate.
pub fn solve(obj: &Objective, x0: &[f64], cfg: &SolverConfig) -> Result<SolveReport, SolverError> {
    cfg.validate()?;
    let n = obj.dim();
    if x0.len() != n {
        return Err(SolverError::Dimension {
            expected: n,
            got: x0.len(),
        });
    }
    if cfg.weight.dim() != n {
        return Err(SolverError::Dimension {
            expected: n,
            got: cfg.weight.dim(),
        });
    }
    obj.eval(x0)?;

    let len = cfg.horizon + 1;
    let weight = &cfg.weight;
    let mut controls = cfg.init_control.materialize(n, len)?;
    let mut states = Sequence::zeros(n, len + 1);
    let mut costates = Sequence::zeros(n, len);
    let mut grad = Sequence::zeros(n, len);
    let mut scratch = vec![0.0; n];

    let mut trial_controls = controls.clone();
    let mut trial_states = states.clone();

    let mut residual_history = Vec::new();
    let mut cost_history = Vec::new();
    let mut alpha = cfg.alpha;
    let mut failure = None;

    let (floor, grow) = match cfg.step_rule {
        StepRule::Fixed => (cfg.alpha, 1.0),
        StepRule::Halving { floor_ratio } => (cfg.alpha * floor_ratio, 1.0),
        StepRule::Adaptive { grow, floor_ratio } => (cfg.alpha * floor_ratio, grow),
    };

    let mut cost;
    let mut t = 0;
    let termination = 'outer: {
        if let Some(k) = rollout_into(x0, &controls, &mut states) {
            failure = Some(format!("initial rollout is not finite at state {k}"));
            break 'outer Termination::NumericalError;
        }
        cost = cost_unchecked(obj, weight, &states, &controls);
        loop {
            if let Err(e) = costates_into(obj, &states, &mut costates, &mut scratch) {
                failure = Some(e.to_string());
                break 'outer Termination::NumericalError;
            }
            let residual = hamiltonian_gradient_into(weight, &controls, &costates, &mut grad);
            residual_history.push(residual);
            cost_history.push(cost);
            if !residual.is_finite() || !cost.is_finite() {
                failure = Some(format!("non-finite residual or cost at iteration {t}"));
                break 'outer Termination::NumericalError;
            }
            if residual < cfg.epsilon {
                break 'outer Termination::Converged;
            }
            if t >= cfg.max_outer {
                break 'outer Termination::MaxIters;
            }

            let tol = 1e-12 * (1.0 + cost.abs());
            let trial_cost = loop {
                for ((tu, u), g) in trial_controls
                    .data
                    .iter_mut()
                    .zip(&controls.data)
                    .zip(&grad.data)
                {
                    *tu = u - alpha * g;
                }
                let finite = rollout_into(x0, &trial_controls, &mut trial_states).is_none();
                let c = if finite {
                    cost_unchecked(obj, weight, &trial_states, &trial_controls)
                } else {
                    f64::NAN
                };
                let at_floor = alpha <= floor;
                if matches!(cfg.step_rule, StepRule::Fixed) || at_floor {
                    if !c.is_finite() {
                        failure = Some(format!(
                            "control update {t} with alpha = {alpha:e} left the finite range"
                        ));
                        break 'outer Termination::NumericalError;
                    }
                    break c;
                }
                if c.is_finite() && c <= cost + tol {
                    break c;
                }
                alpha = (alpha * 0.5).max(floor);
            };
            std::mem::swap(&mut controls, &mut trial_controls);
            std::mem::swap(&mut states, &mut trial_states);
            cost = trial_cost;
            alpha *= grow;
            t += 1;
        }
    };

    let final_state = states.last().to_vec();
    Ok(SolveReport {
        final_state,
        trajectory: Trajectory {
            states,
            controls,
            costates: Some(costates),
        },
        outer_iters: t,
        residual_history,
        cost_history,
        termination,
        final_alpha: alpha,
        failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmpResidual {
    /// `max_k |u_k + R^{-1} sum_{i=k+1}^{N+1} grad f(x_i)|`
    pub max_residual: f64,
    pub per_step: Vec<f64>,
    /// Spectral norm of `R^{-1}`.
    pub weight_inverse_norm: f64,
}

/// Consistency of the controls with the closed form
/// `u_k = -R^{-1} sum_{i=k+1}^{N+1} grad f(x_i)`.
///
/// The gradient sums are formed directly rather than through the costate
/// recursion.
pub fn verify_pmp(
    obj: &Objective,
    weight: &Matrix,
    report: &SolveReport,
) -> Result<PmpResidual, SolverError> {
    let chol = Cholesky::factor(&weight.symmetrized())?;
    let traj = &report.trajectory;
    let states = &traj.states;
    let grads = states
        .iter()
        .map(|x| obj.grad(x))
        .collect::<Result<Vec<_>, _>>()?;
    let n = states.dim();
    let mut per_step = Vec::with_capacity(traj.controls.len());
    for (k, u) in traj.controls.iter().enumerate() {
        let mut sum = vec![0.0; n];
        for g in &grads[k + 1..] {
            for (s, gi) in sum.iter_mut().zip(g) {
                *s += gi;
            }
        }
        chol.solve_in_place(&mut sum);
        let r: Vec<f64> = u.iter().zip(&sum).map(|(a, b)| a + b).collect();
        per_step.push(norm2(&r));
    }
    let max_residual = per_step.iter().copied().fold(0.0, f64::max);
    Ok(PmpResidual {
        max_residual,
        per_step,
        weight_inverse_norm: chol.inverse_norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Steadiness {
    Steady { state: Vec<f64> },
    NotSteady { tail_max: f64 },
}

impl Steadiness {
    pub fn is_steady(&self) -> bool {
        matches!(self, Steadiness::Steady { .. })
    }
}

/// `x_{N+1}` if the last `ceil(N / 10)` controls are all within
/// `plateau_tol`, else the largest control norm over that tail.
pub fn steady_state_extract(traj: &Trajectory, plateau_tol: f64) -> Steadiness {
    let horizon = traj.horizon();
    let tail = horizon.div_ceil(10).max(1);
    let tail_max = traj
        .controls
        .iter()
        .skip(traj.controls.len() - tail)
        .map(norm2)
        .fold(0.0, f64::max);
    if tail_max <= plateau_tol {
        Steadiness::Steady {
            state: traj.final_state().to_vec(),
        }
    } else {
        Steadiness::NotSteady { tail_max }
    }
}

/// Number of leading trajectory steps before the state enters, and then
/// stays within, `tol` of `target`. `None` if the terminal state is outside.
pub fn steps_to_plateau(states: &Sequence, target: &[f64], tol: f64) -> Option<usize> {
    let inside: Vec<bool> = states
        .iter()
        .map(|x| crate::numerics::dist2(x, target) <= tol)
        .collect();
    if !*inside.last()? {
        return None;
    }
    let last_outside = inside.iter().rposition(|&b| !b);
    Some(last_outside.map_or(0, |k| k + 1))
}
