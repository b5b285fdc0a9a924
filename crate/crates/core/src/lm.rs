//! The outer iteration: model construction, ratio test, acceptance and the
//! update of the regularization parameter `μ`.
//!
//! Each iteration `j` evaluates an estimate `f⁰` at `x_j`, draws a random
//! Gauss-Newton model with gradient `g` and Jacobian `J`, sets
//! `γ = μ‖g‖`, approximately minimizes
//!
//! ```text
//! m(x_j + s) = m(x_j) + gᵀs + ½ sᵀ(JᵀJ + γI)s
//! ```
//!
//! and accepts the step when `ρ = (f⁰ − f¹)/(m(x_j) − m(x_j+s)) ≥ η₁` and
//! `‖g‖ ≥ η₂/μ`. Accepted steps shrink `μ` by `λ` (never below `μ_min`),
//! rejected ones grow it by `λ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite_mat, ensure_finite_vec, Error, Result};
use crate::oracles::{AccuracyConstants, ModelOracle, Oracle};
use crate::problem::ResidualProblem;
use crate::subproblem::{StepContract, SubproblemSolver, TruncatedCg};

/// Constants of the method plus run controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Ratio threshold `η₁ ∈ (0,1)`.
    pub eta1: f64,
    /// Gradient-scale threshold `η₂ > 0`.
    pub eta2: f64,
    pub mu_min: f64,
    pub mu0: f64,
    /// Multiplicative update factor `λ > 1`.
    pub lambda: f64,
    /// The run stops once `μ` exceeds this value.
    pub mu_max: f64,
    pub max_iters: usize,
    /// Relative residual tolerance of the truncated CG subsolver.
    pub cg_tol: f64,
    /// CG iteration cap; `None` means the problem dimension.
    pub cg_max_iters: Option<usize>,
    /// Optional stop on the true gradient, `‖∇f(x_j)‖ ≤ ε`. Needs ground truth.
    pub grad_tol: Option<f64>,
    /// Thresholds used to label each iteration's accuracy events.
    pub event_thresholds: Option<AccuracyConstants>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 1.0,
            mu_min: 1e-16,
            mu0: 1.0,
            lambda: 2.0,
            mu_max: 1e16,
            max_iters: 1000,
            cg_tol: 1e-10,
            cg_max_iters: None,
            grad_tol: None,
            event_thresholds: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.eta1 > 0.0 && self.eta1 < 1.0) {
            return bad("eta1 must lie in (0,1)");
        }
        if !(self.eta2 > 0.0) {
            return bad("eta2 must be positive");
        }
        if !(self.lambda > 1.0) {
            return bad("lambda must exceed 1");
        }
        if !(self.mu_min > 0.0) {
            return bad("mu_min must be positive");
        }
        if !(self.mu_min <= self.mu0 && self.mu0 < self.mu_max) {
            return bad("need mu_min <= mu0 < mu_max");
        }
        if !(self.cg_tol >= 0.0) {
            return bad("cg_tol must be non-negative");
        }
        if let Some(eps) = self.grad_tol {
            if !(eps > 0.0) {
                return bad("grad_tol must be positive");
            }
        }
        if let Some(c) = &self.event_thresholds {
            c.validate()?;
        }
        Ok(())
    }

    /// CG subsolver with this config's tolerance and iteration cap.
    pub fn truncated_cg(&self) -> TruncatedCg {
        TruncatedCg {
            tol: self.cg_tol,
            max_iters: self.cg_max_iters,
        }
    }
}

/// Evolving iterate and regularization parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: DVector<f64>,
    pub mu: f64,
    pub iter: usize,
}

/// One iteration's random model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub center: DVector<f64>,
    pub m_at_center: f64,
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
    /// `μ‖g‖`.
    pub gamma: f64,
    pub mu: f64,
}

impl ModelSnapshot {
    pub fn new(
        center: DVector<f64>,
        m_at_center: f64,
        g: DVector<f64>,
        jac: DMatrix<f64>,
        mu: f64,
    ) -> Result<Self> {
        let n = center.len();
        if g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: g.len(),
            });
        }
        if jac.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: jac.ncols(),
            });
        }
        if !m_at_center.is_finite() {
            return Err(Error::NonFinite("model value"));
        }
        ensure_finite_vec(&g, "model gradient")?;
        ensure_finite_mat(&jac, "model Jacobian")?;
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")));
        }
        let gamma = mu * g.norm();
        Ok(Self {
            center,
            m_at_center,
            g,
            jac,
            gamma,
            mu,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(JᵀJ + γI) v` without forming the matrix.
    pub fn hess_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.jac.tr_mul(&(&self.jac * v)) + v * self.gamma
    }

    /// Dense `JᵀJ + γI`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.jac.tr_mul(&self.jac) + DMatrix::identity(n, n) * self.gamma
    }

    /// `m(x) − m(x+s)`, computed without forming `m(x+s)`.
    pub fn decrease(&self, s: &DVector<f64>) -> f64 {
        let js = &self.jac * s;
        -(self.g.dot(s) + 0.5 * (js.norm_squared() + self.gamma * s.norm_squared()))
    }
}

/// Draws a model at `x` and wraps it in a [`ModelSnapshot`].
pub fn build_model<O: ModelOracle + ?Sized>(
    oracle: &mut O,
    x: &DVector<f64>,
    mu: f64,
) -> Result<ModelSnapshot> {
    let draw = oracle.draw_model(x, mu)?;
    ModelSnapshot::new(x.clone(), draw.m_at_center, draw.g, draw.jac, mu)
}

/// `m(x+s) = m(x) + gᵀs + ½ sᵀ(JᵀJ + γI)s`.
pub fn model_value(snap: &ModelSnapshot, s: &DVector<f64>) -> Result<f64> {
    if s.len() != snap.dim() {
        return Err(Error::DimensionMismatch {
            expected: snap.dim(),
            found: s.len(),
        });
    }
    Ok(snap.m_at_center - snap.decrease(s))
}

/// `ρ = (f⁰ − f¹)/(model decrease)`.
pub fn compute_rho(f0: f64, f1: f64, model_decrease: f64) -> Result<f64> {
    if !(model_decrease > 0.0) {
        return Err(Error::DegenerateSubproblem(model_decrease));
    }
    if !(f0.is_finite() && f1.is_finite()) {
        return Err(Error::NonFinite("function estimate"));
    }
    Ok((f0 - f1) / model_decrease)
}

/// Estimates and ratio of one iteration; `None` fields were never computed
/// (zero model gradient).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepEvaluation {
    pub f0: f64,
    pub f1: Option<f64>,
    pub model_decrease: Option<f64>,
    pub rho: Option<f64>,
}

/// Per-iteration telemetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub f0: f64,
    pub f1: Option<f64>,
    pub rho: Option<f64>,
    pub model_decrease: Option<f64>,
    pub step_norm: f64,
    pub g_norm: f64,
    pub success: bool,
    pub mu_before: f64,
    pub mu_after: f64,
    /// `f(x_j)`.
    pub true_f: Option<f64>,
    /// `f(x_j + s_j)`, whether or not the step was accepted.
    pub true_f_trial: Option<f64>,
    /// `‖∇f(x_j)‖`.
    pub true_grad_norm: Option<f64>,
    /// `‖g − ∇f(x_j)‖`.
    pub model_grad_error: Option<f64>,
    /// `|f(x_j) − m(x_j)|`.
    pub model_value_error: Option<f64>,
    /// Model accuracy event.
    pub event_u: Option<bool>,
    /// Estimate accuracy event.
    pub event_v: Option<bool>,
}

impl IterationRecord {
    /// Acceptance test evaluated from the record alone.
    pub fn acceptance(&self, cfg: &SolverConfig) -> bool {
        matches!(self.rho, Some(r) if r >= cfg.eta1) && self.g_norm >= cfg.eta2 / self.mu_before
    }

    pub fn has_ground_truth(&self) -> bool {
        self.true_f.is_some() && self.true_grad_norm.is_some()
    }
}

/// Performs step 5: accept or reject and update `μ`.
pub fn apply_update(
    state: &SolverState,
    snap: &ModelSnapshot,
    step: &DVector<f64>,
    eval: &StepEvaluation,
    cfg: &SolverConfig,
) -> (SolverState, IterationRecord) {
    let g_norm = snap.g.norm();
    let success = matches!(eval.rho, Some(r) if r >= cfg.eta1) && g_norm >= cfg.eta2 / state.mu;
    let (x, mu) = if success {
        (&state.x + step, (state.mu / cfg.lambda).max(cfg.mu_min))
    } else {
        (state.x.clone(), cfg.lambda * state.mu)
    };
    let record = IterationRecord {
        iter: state.iter,
        f0: eval.f0,
        f1: eval.f1,
        rho: eval.rho,
        model_decrease: eval.model_decrease,
        step_norm: step.norm(),
        g_norm,
        success,
        mu_before: state.mu,
        mu_after: mu,
        true_f: None,
        true_f_trial: None,
        true_grad_norm: None,
        model_grad_error: None,
        model_value_error: None,
        event_u: None,
        event_v: None,
    };
    let next = SolverState {
        x,
        mu,
        iter: state.iter + 1,
    };
    (next, record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MuExceeded,
    MaxIterations,
    GradientTolerance,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MuExceeded => "mu_exceeded",
            StopReason::MaxIterations => "max_iterations",
            StopReason::GradientTolerance => "gradient_tolerance",
        }
    }
}

/// Full history of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    pub config: SolverConfig,
    pub contract: StepContract,
    pub records: Vec<IterationRecord>,
    pub x0: DVector<f64>,
    pub x_final: DVector<f64>,
    pub mu_final: f64,
    pub stop: StopReason,
    /// First `j` with `‖∇f(x_j)‖ ≤ grad_tol`, when that rule is active and fired.
    pub hitting_time: Option<usize>,
    /// `‖∇f‖` at the final iterate, when ground truth is available.
    pub final_grad_norm: Option<f64>,
    pub final_true_f: Option<f64>,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn successes(&self) -> usize {
        self.records.iter().filter(|r| r.success).count()
    }

    /// `μ_0, μ_1, …, μ_final`.
    pub fn mu_sequence(&self) -> Vec<f64> {
        let mut mus: Vec<f64> = self.records.iter().map(|r| r.mu_before).collect();
        mus.push(self.mu_final);
        mus
    }
}

/// Runs the method from `x0` until `μ > μ_max`, the iteration cap, or the
/// optional true-gradient rule.
///
/// `truth` supplies the exact objective for the ground-truth fields of each
/// record; without it those fields stay `None` and `grad_tol` is rejected.
/// The oracle is reseeded from `seed` first, so identical inputs give
/// identical traces.
pub fn run<O, S>(
    truth: Option<&dyn ResidualProblem>,
    oracle: &mut O,
    subsolver: &S,
    cfg: &SolverConfig,
    x0: DVector<f64>,
    seed: u64,
) -> Result<RunTrace>
where
    O: Oracle + ?Sized,
    S: SubproblemSolver + ?Sized,
{
    cfg.validate()?;
    if cfg.grad_tol.is_some() && truth.is_none() {
        return Err(Error::InvalidConfig(
            "grad_tol needs a problem with ground truth".into(),
        ));
    }
    if let Some(p) = truth {
        if p.dim() != x0.len() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                found: x0.len(),
            });
        }
    }
    ensure_finite_vec(&x0, "initial point")?;
    oracle.reseed_all(seed);

    let mut state = SolverState {
        x: x0.clone(),
        mu: cfg.mu0,
        iter: 0,
    };
    let mut records = Vec::new();
    let mut hitting_time = None;

    let stop = loop {
        if state.mu > cfg.mu_max {
            break StopReason::MuExceeded;
        }
        if state.iter >= cfg.max_iters {
            break StopReason::MaxIterations;
        }
        let j = state.iter;
        let ground = match truth {
            Some(p) => {
                let f = p.objective(&state.x).map_err(|e| e.at(j))?;
                let grad = p.gradient(&state.x).map_err(|e| e.at(j))?;
                Some((f, grad))
            }
            None => None,
        };
        if let (Some(eps), Some((_, grad))) = (cfg.grad_tol, &ground) {
            if grad.norm() <= eps {
                hitting_time = Some(j);
                break StopReason::GradientTolerance;
            }
        }

        let f0 = oracle.estimate_center(&state.x, state.mu).map_err(|e| e.at(j))?;
        if !f0.is_finite() {
            return Err(Error::NonFinite("estimate f0").at(j));
        }
        let snap = build_model(oracle, &state.x, state.mu).map_err(|e| e.at(j))?;

        let n = snap.dim();
        let (step, eval) = if snap.g.norm() == 0.0 {
            // Zero model gradient: no step, unsuccessful by the η₂ test.
            (
                DVector::zeros(n),
                StepEvaluation {
                    f0,
                    ..Default::default()
                },
            )
        } else {
            let step = subsolver.solve(&snap).map_err(|e| e.at(j))?;
            let decrease = snap.decrease(&step);
            let trial = &state.x + &step;
            let f1 = oracle.estimate_trial(&trial, state.mu).map_err(|e| e.at(j))?;
            let rho = match compute_rho(f0, f1, decrease) {
                Ok(r) => Some(r),
                Err(Error::DegenerateSubproblem(d)) => {
                    log::warn!("iteration {j}: non-positive model decrease {d:e} with nonzero gradient; treating as unsuccessful");
                    None
                }
                Err(e) => return Err(e.at(j)),
            };
            (
                step,
                StepEvaluation {
                    f0,
                    f1: Some(f1),
                    model_decrease: Some(decrease),
                    rho,
                },
            )
        };

        let (next, mut record) = apply_update(&state, &snap, &step, &eval, cfg);
        if let (Some(p), Some((f, grad))) = (truth, &ground) {
            record.true_f = Some(*f);
            record.true_grad_norm = Some(grad.norm());
            record.model_grad_error = Some((&snap.g - grad).norm());
            record.model_value_error = Some((f - snap.m_at_center).abs());
            if eval.f1.is_some() {
                let trial = &state.x + &step;
                record.true_f_trial = Some(p.objective(&trial).map_err(|e| e.at(j))?);
            }
            if let Some(c) = &cfg.event_thresholds {
                label_events(&mut record, c);
            }
        }
        records.push(record);
        state = next;
    };

    let (final_grad_norm, final_true_f) = match truth {
        Some(p) => (
            Some(p.gradient(&state.x)?.norm()),
            Some(p.objective(&state.x)?),
        ),
        None => (None, None),
    };

    Ok(RunTrace {
        seed,
        config: cfg.clone(),
        contract: subsolver.contract(),
        records,
        x0,
        x_final: state.x,
        mu_final: state.mu,
        stop,
        hitting_time,
        final_grad_norm,
        final_true_f,
    })
}

/// Fills `event_u` / `event_v` from the ground-truth fields.
pub fn label_events(record: &mut IterationRecord, c: &AccuracyConstants) {
    record.event_u = model_event(record, c);
    record.event_v = estimate_event(record, c);
}

/// `‖g − ∇f‖ ≤ κ_eg/μ` and `|f − m(x)| ≤ κ_ef/μ²`.
pub fn model_event(r: &IterationRecord, c: &AccuracyConstants) -> Option<bool> {
    let mu = r.mu_before;
    Some(r.model_grad_error? <= c.kappa_eg / mu && r.model_value_error? <= c.kappa_ef / (mu * mu))
}

/// Both estimates within `ε_f/μ²` of the truth.
pub fn estimate_event(r: &IterationRecord, c: &AccuracyConstants) -> Option<bool> {
    let tol = c.eps_f / (r.mu_before * r.mu_before);
    let f = r.true_f?;
    let ft = r.true_f_trial?;
    let f1 = r.f1?;
    Some((r.f0 - f).abs() <= tol && (f1 - ft).abs() <= tol)
}
