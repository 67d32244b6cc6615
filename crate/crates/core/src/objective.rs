//! Objective functions and the registry of reference test cases.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    central_diff_grad_into, central_diff_hess, default_grad_step, default_hess_step, dist2, norm2,
    FiniteDiffError, Matrix,
};

pub type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("objective `{name}` is not finite at {point:?}")]
    Domain { name: String, point: Vec<f64> },
    #[error(transparent)]
    FiniteDiff(#[from] FiniteDiffError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown case `{0}` (expected one of f1..f8, quadratic)")]
pub struct UnknownCase(pub String);

/// A scalar field `f: R^n -> R` with optional analytic derivatives.
///
/// Missing derivatives fall back to central differences.
#[derive(Clone)]
pub struct Objective {
    name: String,
    dim: usize,
    value: ValueFn,
    gradient: Option<GradientFn>,
    hessian: Option<HessianFn>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.gradient.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl Objective {
    pub fn new<F>(name: impl Into<String>, dim: usize, value: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        assert!(dim > 0, "objective dimension must be positive");
        Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_gradient<G>(mut self, gradient: G) -> Self
    where
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_hessian<H>(mut self, hessian: H) -> Self
    where
        H: Fn(&[f64]) -> Matrix + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ObjectiveError> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(ObjectiveError::Dimension {
                expected: self.dim,
                got: x.len(),
            })
        }
    }

    fn domain(&self, x: &[f64]) -> ObjectiveError {
        ObjectiveError::Domain {
            name: self.name.clone(),
            point: x.to_vec(),
        }
    }

    /// Raw value without checks; may be NaN outside the domain.
    pub fn value_unchecked(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        self.check_dim(x)?;
        let v = (self.value)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain(x))
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ObjectiveError> {
        self.check_dim(x)?;
        match &self.gradient {
            Some(g) => g(x, out),
            None => central_diff_grad_into(&*self.value, x, default_grad_step(x), out)?,
        }
        if out.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(self.domain(x))
        }
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        let mut out = vec![0.0; self.dim];
        self.grad_into(x, &mut out)?;
        Ok(out)
    }

    /// Central-difference gradient regardless of whether an analytic one exists.
    pub fn fd_grad(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.dim];
        central_diff_grad_into(&*self.value, x, default_grad_step(x), &mut out)?;
        Ok(out)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Matrix, ObjectiveError> {
        self.check_dim(x)?;
        let h = match &self.hessian {
            Some(h) => h(x),
            None => central_diff_hess(&*self.value, x, default_hess_step(x))?,
        };
        if h.is_finite() {
            Ok(h)
        } else {
            Err(self.domain(x))
        }
    }

    /// Relative discrepancy `|g - g_fd| / (1 + |g|)` between the analytic and
    /// the central-difference gradient at `x`.
    pub fn gradient_discrepancy(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        let g = self.grad(x)?;
        let fd = self.fd_grad(x)?;
        Ok(dist2(&g, &fd) / (1.0 + norm2(&g)))
    }

    /// The objective seen along the `active` coordinates only, with every
    /// other coordinate frozen at its value in `base`.
    pub fn restricted(&self, active: &[usize], base: &[f64]) -> Objective {
        assert_eq!(base.len(), self.dim);
        assert!(!active.is_empty() && active.iter().all(|&i| i < self.dim));
        let active: Arc<[usize]> = active.into();
        let base: Arc<[f64]> = base.into();
        let embed = {
            let (active, base) = (active.clone(), base.clone());
            move |y: &[f64]| {
                let mut x = base.to_vec();
                for (&i, &v) in active.iter().zip(y) {
                    x[i] = v;
                }
                x
            }
        };
        let value = self.value.clone();
        let embed_v = embed.clone();
        let mut restricted = Objective::new(
            format!("{}|{:?}", self.name, &*active),
            active.len(),
            move |y| value(&embed_v(y)),
        );
        if let Some(g) = self.gradient.clone() {
            let n = self.dim;
            restricted = restricted.with_gradient(move |y, out| {
                let mut full = vec![0.0; n];
                g(&embed(y), &mut full);
                for (o, &i) in out.iter_mut().zip(active.iter()) {
                    *o = full[i];
                }
            });
        }
        restricted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimumKind {
    Global,
    Local,
}

/// A registered minimum: the coordinates as published (rounded to a few
/// digits) and the stationary point they round from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub kind: MinimumKind,
    pub reported: Vec<f64>,
    pub refined: Vec<f64>,
}

/// A parameter setting exercised by an experiment, with the index of the
/// minimum it is expected to reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaperParam {
    Weight { weight: Matrix, target: usize },
    StepSize { eta: f64, target: usize },
}

#[derive(Debug, Clone)]
pub struct ReferenceCase {
    pub name: String,
    pub formula: &'static str,
    pub objective: Objective,
    pub x0: Vec<f64>,
    pub minima: Vec<Minimum>,
    pub paper_params: Vec<PaperParam>,
}

impl ReferenceCase {
    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        assert_eq!(x0.len(), self.objective.dim());
        self.x0 = x0;
        self
    }

    /// Index of and distance to the registered minimum nearest `x`.
    pub fn nearest_minimum(&self, x: &[f64]) -> Option<(usize, f64)> {
        self.minima
            .iter()
            .enumerate()
            .map(|(i, m)| (i, dist2(&m.reported, x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub const CASE_NAMES: [&str; 9] = ["f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "quadratic"];

/// Beyond this |x| the `exp(x^2)` term of f4 overflows.
pub const F4_DOMAIN: f64 = 26.0;

fn scalar_case(
    name: &str,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
    d2f: fn(f64) -> f64,
) -> Objective {
    Objective::new(name, 1, move |x| f(x[0]))
        .with_gradient(move |x, out| out[0] = df(x[0]))
        .with_hessian(move |x| Matrix::diagonal(&[d2f(x[0])]))
}

fn min1(kind: MinimumKind, reported: f64, refined: f64) -> Minimum {
    Minimum {
        kind,
        reported: vec![reported],
        refined: vec![refined],
    }
}

fn weight(r: f64, target: usize) -> PaperParam {
    PaperParam::Weight {
        weight: Matrix::scaled_identity(1, r),
        target,
    }
}

fn f4_guarded(x: f64, v: f64) -> f64 {
    if x.abs() > F4_DOMAIN {
        f64::NAN
    } else {
        v
    }
}

// f6 = p(x^2) with p(y) = (y - 1)(y - 1/4)(y - 9/4) = y^3 - 3.5y^2 + 3.0625y - 0.5625
fn f6_p1(y: f64) -> f64 {
    3.0 * y * y - 7.0 * y + 3.0625
}

fn f8_terms(x: &[f64]) -> [(f64, f64, f64); 3] {
    let (a, b) = (x[0], x[1]);
    let q = |cx: f64, cy: f64| ((a - cx), (b - cy), (a - cx).powi(2) + (b - cy).powi(2) + 1.0);
    [q(0.0, 0.0), q(10.0, 10.0), q(2.0, 30.0)]
}

/// The convex quadratic `f(x) = x^T x / 2` in `dim` coordinates.
pub fn quadratic(dim: usize) -> Objective {
    Objective::new("quadratic", dim, |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>())
        .with_gradient(|x, out| out.copy_from_slice(x))
        .with_hessian(move |_| Matrix::identity(dim))
}

pub fn registry_get(name: &str) -> Result<ReferenceCase, UnknownCase> {
    use MinimumKind::{Global, Local};
    let case = match name {
        "f1" => ReferenceCase {
            name: name.into(),
            formula: "x^4 + sin(x)",
            objective: scalar_case(
                name,
                |x| x.powi(4) + x.sin(),
                |x| 4.0 * x.powi(3) + x.cos(),
                |x| 12.0 * x * x - x.sin(),
            ),
            x0: vec![10.0],
            minima: vec![min1(Global, -0.592, -0.591_984_789_239_322_5)],
            paper_params: vec![
                weight(1.0, 0),
                weight(200.0, 0),
                weight(0.01, 0),
                PaperParam::StepSize {
                    eta: 0.001,
                    target: 0,
                },
            ],
        },
        "f2" => ReferenceCase {
            name: name.into(),
            formula: "exp(x) + sin(x) + x^2",
            objective: scalar_case(
                name,
                |x| x.exp() + x.sin() + x * x,
                |x| x.exp() + x.cos() + 2.0 * x,
                |x| x.exp() - x.sin() + 2.0,
            ),
            x0: vec![3.0],
            minima: vec![min1(Global, -0.6558, -0.655_795_852_141_092_7)],
            paper_params: vec![
                weight(0.01, 0),
                PaperParam::StepSize { eta: 0.1, target: 0 },
            ],
        },
        "f3" => ReferenceCase {
            name: name.into(),
            formula: "ln(x^2 + 1) + ln((x - 1)^2 + 0.01)",
            objective: scalar_case(
                name,
                |x| (x * x + 1.0).ln() + ((x - 1.0).powi(2) + 0.01).ln(),
                |x| 2.0 * x / (x * x + 1.0) + 2.0 * (x - 1.0) / ((x - 1.0).powi(2) + 0.01),
                |x| {
                    let a = x * x + 1.0;
                    let b = (x - 1.0).powi(2) + 0.01;
                    2.0 * (1.0 - x * x) / (a * a) + 2.0 * (0.01 - (x - 1.0).powi(2)) / (b * b)
                },
            ),
            x0: vec![2.0],
            minima: vec![min1(Global, 0.995, 0.994_987_500_712_569_4)],
            paper_params: vec![
                weight(0.01, 0),
                PaperParam::StepSize {
                    eta: 0.01,
                    target: 0,
                },
            ],
        },
        "f4" => ReferenceCase {
            name: name.into(),
            formula: "7x^3 + x^4 + exp(x^2) + exp(-x^2)",
            objective: scalar_case(
                name,
                |x| f4_guarded(x, 7.0 * x.powi(3) + x.powi(4) + (x * x).exp() + (-x * x).exp()),
                |x| {
                    f4_guarded(
                        x,
                        21.0 * x * x + 4.0 * x.powi(3) + 2.0 * x * (x * x).exp()
                            - 2.0 * x * (-x * x).exp(),
                    )
                },
                |x| {
                    let x2 = x * x;
                    f4_guarded(
                        x,
                        42.0 * x
                            + 12.0 * x2
                            + (2.0 + 4.0 * x2) * x2.exp()
                            + (4.0 * x2 - 2.0) * (-x2).exp(),
                    )
                },
            ),
            x0: vec![0.0],
            minima: vec![min1(Global, -1.566, -1.566_268_168_898_988_9)],
            paper_params: vec![
                weight(1.0 / 0.026, 0),
                PaperParam::StepSize {
                    eta: 0.026,
                    target: 0,
                },
            ],
        },
        "f5" => ReferenceCase {
            name: name.into(),
            formula: "x - 4x^2 + 0.2x^3 + 2x^4",
            objective: scalar_case(
                name,
                |x| x - 4.0 * x * x + 0.2 * x.powi(3) + 2.0 * x.powi(4),
                |x| 1.0 - 8.0 * x + 0.6 * x * x + 8.0 * x.powi(3),
                |x| -8.0 + 1.2 * x + 24.0 * x * x,
            ),
            x0: vec![-10.0],
            minima: vec![
                min1(Local, 0.89, 0.890_412_658_955_344_8),
                min1(Global, -1.094, -1.093_762_585_372_519_8),
            ],
            paper_params: vec![weight(100.0, 0), weight(0.1, 1)],
        },
        "f6" => ReferenceCase {
            name: name.into(),
            formula: "(x - 1)(x + 1)(x + 0.5)(x + 1.5)(x - 0.5)(x - 1.5)",
            objective: scalar_case(
                name,
                |x| (x - 1.0) * (x + 1.0) * (x + 0.5) * (x + 1.5) * (x - 0.5) * (x - 1.5),
                |x| 2.0 * x * f6_p1(x * x),
                |x| {
                    let y = x * x;
                    2.0 * f6_p1(y) + 4.0 * y * (6.0 * y - 7.0)
                },
            ),
            x0: vec![-3.0],
            minima: vec![
                min1(Local, 1.323, 1.322_875_655_532_295_3),
                min1(Local, 0.0, 0.0),
                min1(Local, -1.323, -1.322_875_655_532_295_3),
            ],
            paper_params: vec![weight(1.0, 0), weight(200.0, 1), weight(500.0, 2)],
        },
        "f7" => ReferenceCase {
            name: name.into(),
            formula: "x^4 + y^4 + sin(x)",
            objective: Objective::new(name, 2, |v| v[0].powi(4) + v[1].powi(4) + v[0].sin())
                .with_gradient(|v, out| {
                    out[0] = 4.0 * v[0].powi(3) + v[0].cos();
                    out[1] = 4.0 * v[1].powi(3);
                }),
            x0: vec![2.0, -2.0],
            minima: vec![Minimum {
                kind: Global,
                reported: vec![-0.592, 0.0],
                refined: vec![-0.591_984_789_239_322_5, 0.0],
            }],
            paper_params: vec![
                PaperParam::Weight {
                    weight: Matrix::scaled_identity(2, 1.0 / 0.12),
                    target: 0,
                },
                PaperParam::StepSize {
                    eta: 0.12,
                    target: 0,
                },
            ],
        },
        "f8" => ReferenceCase {
            name: name.into(),
            formula: "ln(x^2 + y^2 + 1) + ln((x - 10)^2 + (y - 10)^2 + 1) + ln((x - 2)^2 + (y - 30)^2 + 1)",
            objective: Objective::new(name, 2, |v| {
                f8_terms(v).iter().map(|&(_, _, q)| q.ln()).sum()
            })
            .with_gradient(|v, out| {
                out[0] = 0.0;
                out[1] = 0.0;
                for (dx, dy, q) in f8_terms(v) {
                    out[0] += 2.0 * dx / q;
                    out[1] += 2.0 * dy / q;
                }
            }),
            x0: vec![-20.0, 40.0],
            minima: vec![
                Minimum {
                    kind: Local,
                    reported: vec![2.0, 29.9],
                    refined: vec![2.015_149_308_963_852, 29.923_147_519_807_635],
                },
                Minimum {
                    kind: Local,
                    reported: vec![0.05, 0.08],
                    refined: vec![0.052_849_661_397_586_41, 0.084_082_091_876_695_3],
                },
                Minimum {
                    kind: Local,
                    reported: vec![9.93, 9.99],
                    refined: vec![9.932_822_645_870_792, 9.992_982_206_330_563],
                },
            ],
            paper_params: vec![],
        },
        "quadratic" => ReferenceCase {
            name: name.into(),
            formula: "x^T x / 2",
            objective: quadratic(1),
            x0: vec![1.0],
            minima: vec![Minimum {
                kind: Global,
                reported: vec![0.0],
                refined: vec![0.0],
            }],
            paper_params: vec![],
        },
        other => return Err(UnknownCase(other.to_string())),
    };
    Ok(case)
}

/// A `dim`-dimensional quadratic case starting from `x0`.
pub fn quadratic_case(x0: Vec<f64>) -> ReferenceCase {
    let dim = x0.len();
    ReferenceCase {
        name: "quadratic".into(),
        formula: "x^T x / 2",
        objective: quadratic(dim),
        x0,
        minima: vec![Minimum {
            kind: MinimumKind::Global,
            reported: vec![0.0; dim],
            refined: vec![0.0; dim],
        }],
        paper_params: vec![],
    }
}
