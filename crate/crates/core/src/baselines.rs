//! Gradient descent and Newton's method, run against the same objectives as
//! the optimal-control solver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{norm2, norm_inf};
use crate::objective::Objective;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Gradient-descent step size; ignored by Newton.
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once `|grad f| < grad_tol`. Zero runs exactly `max_iters` steps.
    pub grad_tol: f64,
    /// Newton treats the Hessian as singular below this pivot magnitude.
    pub singular_tol: f64,
    /// An iterate with `|x|_inf` beyond this counts as diverged.
    #[serde(default = "default_divergence_radius")]
    pub divergence_radius: f64,
}

fn default_divergence_radius() -> f64 {
    1e6
}

impl BaselineConfig {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            max_iters: 10_000,
            grad_tol: 1e-6,
            singular_tol: 1e-12,
            divergence_radius: default_divergence_radius(),
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_grad_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::InvalidConfig(m.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive and finite");
        }
        if !(self.grad_tol >= 0.0) {
            return bad("grad_tol must be non-negative");
        }
        if !(self.singular_tol >= 0.0) {
            return bad("singular_tol must be non-negative");
        }
        if !(self.divergence_radius > 0.0) {
            return bad("divergence_radius must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTermination {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularHessian {
    pub iter: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// `x_0, x_1, ...`; always starts with the initial point.
    pub history: Vec<Vec<f64>>,
    pub grad_norms: Vec<f64>,
    pub termination: BaselineTermination,
    pub singular_hessian: Vec<SingularHessian>,
    pub failure: Option<String>,
}

impl BaselineReport {
    pub fn final_point(&self) -> &[f64] {
        self.history.last().expect("history starts with x0")
    }

    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

enum Method {
    Gradient,
    Newton,
}

/// `x_{k+1} = x_k - eta * grad f(x_k)`.
pub fn gradient_descent(
    obj: &Objective,
    x0: &[f64],
    cfg: &BaselineConfig,
) -> Result<BaselineReport, BaselineError> {
    iterate(obj, x0, cfg, Method::Gradient)
}

/// `x_{k+1} = x_k - H(x_k)^{-1} grad f(x_k)`, holding position whenever the
/// Hessian is singular.
pub fn newton(
    obj: &Objective,
    x0: &[f64],
    cfg: &BaselineConfig,
) -> Result<BaselineReport, BaselineError> {
    iterate(obj, x0, cfg, Method::Newton)
}

fn iterate(
    obj: &Objective,
    x0: &[f64],
    cfg: &BaselineConfig,
    method: Method,
) -> Result<BaselineReport, BaselineError> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(BaselineError::Dimension {
            expected: obj.dim(),
            got: x0.len(),
        });
    }
    let mut history = vec![x0.to_vec()];
    let mut grad_norms = Vec::new();
    let mut singular_hessian = Vec::new();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x.len()];

    let diverged = |why: String| (BaselineTermination::Diverged, Some(why));
    let (termination, failure) = loop {
        let k = history.len() - 1;
        if !x.iter().all(|v| v.is_finite()) {
            break diverged(format!("iterate {k} is not finite"));
        }
        if norm_inf(&x) > cfg.divergence_radius {
            break diverged(format!(
                "iterate {k} left the radius {:e}",
                cfg.divergence_radius
            ));
        }
        if let Err(e) = obj.grad_into(&x, &mut g) {
            break diverged(format!("gradient at iterate {k}: {e}"));
        }
        let gnorm = norm2(&g);
        grad_norms.push(gnorm);

        // The Newton system is examined before the convergence test so that a
        // start at a degenerate stationary point still records the event.
        let step = match method {
            Method::Gradient => Some(g.iter().map(|gi| cfg.eta * gi).collect::<Vec<_>>()),
            Method::Newton => {
                let h = match obj.hessian(&x) {
                    Ok(h) => h,
                    Err(e) => break diverged(format!("Hessian at iterate {k}: {e}")),
                };
                match h.lu_solve(&g, cfg.singular_tol) {
                    Some(s) if s.iter().all(|v| v.is_finite()) => Some(s),
                    _ => {
                        singular_hessian.push(SingularHessian {
                            iter: k,
                            x: x.clone(),
                        });
                        None
                    }
                }
            }
        };

        if gnorm < cfg.grad_tol {
            break (BaselineTermination::Converged, None);
        }
        if k >= cfg.max_iters {
            break (BaselineTermination::MaxIters, None);
        }
        if let Some(s) = step {
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi -= si;
            }
        }
        history.push(x.clone());
    };

    Ok(BaselineReport {
        history,
        grad_norms,
        termination,
        singular_hessian,
        failure,
    })
}
