//! Theory-facing quantities and Monte Carlo checks.
//!
//! [`TheoryConstants`] turns the primitive problem, oracle and solver
//! constants into the derived constants of the convergence analysis, and the
//! remaining functions measure what the analysis predicts on actual runs:
//! accuracy events, the success guarantee for accurate iterations, the
//! expected decrease of the Lyapunov function `Φ = τf + (1−τ)/μ²`, and the
//! scaling of the hitting time `T_ε = inf{j : ‖∇f(x_j)‖ ≤ ε}`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::RunTrace;
use crate::oracles::AccuracyConstants;
use crate::lm::SolverConfig;
use crate::problem::{LinearLeastSquares, ResidualProblem};
use crate::subproblem::StepContract;
use crate::rng::derive_path;

/// Where a problem constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantSource {
    Analytic,
    Sampled,
    Configured,
}

/// Inputs to the derived constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrimitives {
    /// Lipschitz constant of `∇f`.
    pub nu: f64,
    pub nu_source: ConstantSource,
    /// Uniform bound on `‖J_m‖`.
    pub kappa_jm: f64,
    pub kappa_jm_source: ConstantSource,
    pub theta_fcd: f64,
    pub theta_in: f64,
    pub kappa_ef: f64,
    pub kappa_eg: f64,
    pub eps_f: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda: f64,
    pub mu0: f64,
    /// `f(x_0)`; the objective is a half squared norm, so `f ≥ 0`.
    pub f_x0: f64,
}

impl TheoryPrimitives {
    pub fn accuracy(&self, p: f64, q: f64) -> AccuracyConstants {
        AccuracyConstants {
            kappa_ef: self.kappa_ef,
            kappa_eg: self.kappa_eg,
            eps_f: self.eps_f,
            p,
            q,
        }
    }
}

impl TheoryPrimitives {
    /// Analytic constants for `r(x) = Ax − b`: `ν = ‖A‖²` and, unless a
    /// Jacobian cap is given, `κ_Jm = ‖A‖`.
    pub fn for_linear(
        problem: &LinearLeastSquares,
        x0: &DVector<f64>,
        accuracy: &AccuracyConstants,
        cfg: &SolverConfig,
        contract: &StepContract,
        jacobian_cap: Option<f64>,
    ) -> Result<Self> {
        let (kappa_jm, kappa_jm_source) = match jacobian_cap {
            Some(cap) => (cap, ConstantSource::Configured),
            None => (problem.jacobian_norm(), ConstantSource::Analytic),
        };
        Ok(Self {
            nu: problem.gradient_lipschitz(),
            nu_source: ConstantSource::Analytic,
            kappa_jm,
            kappa_jm_source,
            theta_fcd: contract.theta_fcd,
            theta_in: contract.theta_in,
            kappa_ef: accuracy.kappa_ef,
            kappa_eg: accuracy.kappa_eg,
            eps_f: accuracy.eps_f,
            eta1: cfg.eta1,
            eta2: cfg.eta2,
            lambda: cfg.lambda,
            mu0: cfg.mu0,
            f_x0: problem.objective(x0)?,
        })
    }
}

/// Derived constants that do not depend on `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConstants {
    pub kappa_efs: f64,
    pub alpha: f64,
    pub kappa_mu_g: f64,
    /// `max{κ_Jm², 8(κ_ef+κ_efs)/(η₁θ_fcd)}`.
    pub m: f64,
    pub c1: f64,
    pub c2: f64,
    /// Smallest admissible `ζ`.
    pub zeta_min: f64,
    /// Whether the stronger `η₂` requirement of the convergence result holds
    /// (it adds `6(κ_ef+κ_efs)/θ_fcd` to the lower bound).
    pub eta2_convergence_ok: bool,
}

impl BaseConstants {
    pub fn new(pr: &TheoryPrimitives) -> Result<Self> {
        let positive = [
            pr.nu, pr.theta_fcd, pr.theta_in, pr.kappa_ef, pr.kappa_eg, pr.eps_f, pr.eta2, pr.mu0,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(pr.kappa_jm >= 0.0) {
            return Err(Error::InvalidConfig("theory primitives must be positive".into()));
        }
        if !(pr.eta1 > 0.0 && pr.eta1 < 1.0 && pr.lambda > 1.0 && pr.f_x0 >= 0.0) {
            return Err(Error::InvalidConfig("need 0<η₁<1, λ>1, f(x₀)≥0".into()));
        }
        let kjm2 = pr.kappa_jm * pr.kappa_jm;
        let eta2_floor = kjm2.max(8.0 * pr.eps_f / (pr.eta1 * pr.theta_fcd));
        if pr.eta2 < eta2_floor {
            return Err(Error::InvalidConfig(format!(
                "η₂ = {} is below max{{κ_Jm², 8ε_f/(η₁θ_fcd)}} = {eta2_floor}",
                pr.eta2
            )));
        }
        let kappa_efs = (pr.kappa_ef + 2.0 * pr.kappa_eg + pr.nu + 4.0 * kjm2) / 2.0;
        let alpha = pr.eps_f + pr.kappa_eg + pr.nu + 5.0 * kjm2 + 2.0 * pr.theta_in;
        let one_m = 1.0 - pr.eta1;
        let root = (alpha * alpha + 4.0 * alpha * kjm2 * one_m).sqrt();
        let kappa_mu_g = ((alpha + root) / (2.0 * one_m)).max(pr.eta2);
        let decrease_ratio = 8.0 * (pr.kappa_ef + kappa_efs) / (pr.eta1 * pr.theta_fcd);
        let m = kjm2.max(decrease_ratio);
        let c1 = pr.eta1 * pr.theta_fcd / 8.0 * m / (pr.kappa_eg + m);
        let c2 = pr.eta1 * pr.eta2 * pr.theta_fcd / 4.0 - 2.0 * pr.eps_f;
        if c2 <= 0.0 {
            return Err(Error::InvalidConfig(format!("C2 = {c2} must be positive")));
        }
        let zeta_min = pr.kappa_eg + kappa_mu_g.max(decrease_ratio).max(kjm2).max(pr.eta2);
        let eta2_convergence_ok = pr.eta2 >= eta2_floor.max(6.0 * (pr.kappa_ef + kappa_efs) / pr.theta_fcd);
        Ok(Self {
            kappa_efs,
            alpha,
            kappa_mu_g,
            m,
            c1,
            c2,
            zeta_min,
            eta2_convergence_ok,
        })
    }
}

/// Full set of derived constants for one choice of `ζ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub primitives: TheoryPrimitives,
    pub base: BaseConstants,
    pub zeta: f64,
    pub c3: f64,
    /// Lower threshold `τ*` for `τ`; `τ` is the midpoint of `(τ*, 1)`.
    pub tau_threshold: f64,
    pub tau: f64,
    pub sigma: f64,
    pub kappa_s: f64,
}

impl TheoryConstants {
    pub fn with_zeta(primitives: TheoryPrimitives, zeta: f64) -> Result<Self> {
        let base = BaseConstants::new(&primitives)?;
        if !(zeta >= base.zeta_min) {
            return Err(Error::InvalidConfig(format!(
                "ζ = {zeta} is below the admissible minimum {}",
                base.zeta_min
            )));
        }
        let pr = &primitives;
        let l2 = pr.lambda * pr.lambda;
        let spread = l2 - 1.0 / l2;
        let ratio = (spread / (base.c1 * zeta))
            .max(spread / base.c2)
            .max(spread / ((pr.kappa_ef + base.kappa_efs) / 2.0));
        let tau_threshold = ratio / (1.0 + ratio);
        let tau = 0.5 * (tau_threshold + 1.0);
        let sigma = 0.25 * (1.0 - tau) * (1.0 - 1.0 / l2);
        let c3 = 2.0 * (1.0 + pr.nu / zeta);
        let kappa_s = (tau * pr.f_x0 + (1.0 - tau) / (pr.mu0 * pr.mu0)) / sigma * zeta * zeta;
        Ok(Self {
            primitives,
            base,
            zeta,
            c3,
            tau_threshold,
            tau,
            sigma,
            kappa_s,
        })
    }

    /// Uses the lattice value `ζ = μ₀λ^s ε` with `s ≥ 1` the smallest
    /// integer making `ζ` admissible.
    pub fn for_epsilon(primitives: TheoryPrimitives, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig("ε must be positive".into()));
        }
        let base = BaseConstants::new(&primitives)?;
        let (s, zeta) = lattice_zeta(primitives.mu0, primitives.lambda, epsilon, base.zeta_min);
        log::debug!("ε = {epsilon}: ζ = {zeta} at s = {s}");
        Self::with_zeta(primitives, zeta)
    }

    /// Upper bound on `E[T_ε]`; infinite unless `pq > 1/2`.
    pub fn expected_hitting_bound(&self, p: f64, q: f64, epsilon: f64) -> f64 {
        hitting_time_bound(self.kappa_s, p * q, epsilon)
    }

    pub fn phi(&self, f: f64, mu: f64) -> f64 {
        self.tau * f + (1.0 - self.tau) / (mu * mu)
    }

    /// `μ_ε = ζ/ε`.
    pub fn mu_epsilon(&self, epsilon: f64) -> f64 {
        self.zeta / epsilon
    }
}

/// `(s, μ₀λ^s ε)` with `s ≥ 1` smallest such that the value reaches `zeta_min`.
pub fn lattice_zeta(mu0: f64, lambda: f64, epsilon: f64, zeta_min: f64) -> (u32, f64) {
    let mut s = 1u32;
    let mut zeta = mu0 * lambda * epsilon;
    while zeta < zeta_min {
        s += 1;
        zeta = mu0 * lambda.powi(s as i32) * epsilon;
    }
    (s, zeta)
}

/// `pq/(2pq−1)(κ_s ε⁻² + 1) − 1`.
pub fn hitting_time_bound(kappa_s: f64, pq: f64, epsilon: f64) -> f64 {
    if pq <= 0.5 {
        return f64::INFINITY;
    }
    pq / (2.0 * pq - 1.0) * (kappa_s / (epsilon * epsilon) + 1.0) - 1.0
}

/// `Φ = τf + (1−τ)/μ²`.
pub fn phi(f: f64, mu: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("τ = {tau} must lie in (0,1)")));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidConfig("μ must be positive".into()));
    }
    Ok(tau * f + (1.0 - tau) / (mu * mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityReport {
    /// `(pq − 1/2) − (C3/C1)(1−p)(1−q)`; the condition holds iff `≥ 0`.
    pub cond1_margin: f64,
    pub cond1_holds: bool,
    /// Right-hand side minus `(1−p)(1−q)`; holds iff `≥ 0`.
    pub cond2_margin: f64,
    pub cond2_holds: bool,
}

impl ProbabilityReport {
    pub fn both(&self) -> bool {
        self.cond1_holds && self.cond2_holds
    }
}

/// The two conditions on `(p, q)` under which `Φ` decreases in expectation
/// by at least `σ/μ²`.
///
/// The first is reported cross-multiplied so the margin stays finite near
/// `p, q → 1`.
pub fn check_probability_conditions(tc: &TheoryConstants, p: f64, q: f64) -> Result<ProbabilityReport> {
    if !(p > 0.0 && p < 1.0 && q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig("p and q must lie in (0,1)".into()));
    }
    let fail = (1.0 - p) * (1.0 - q);
    let cond1_margin = (p * q - 0.5) - tc.c3 / tc.base.c1 * fail;
    let l2 = tc.primitives.lambda.powi(2);
    let tau = tc.tau;
    let rhs = (1.0 - tau) * (1.0 - 1.0 / l2) / (2.0 * (tau * tc.c3 * tc.zeta + (1.0 - tau) * (l2 - 1.0)));
    let cond2_margin = rhs - fail;
    Ok(ProbabilityReport {
        cond1_margin,
        cond1_holds: cond1_margin >= 0.0,
        cond2_margin,
        cond2_holds: cond2_margin >= 0.0,
    })
}

/// Per-iteration accuracy events of one trace and the success guarantee for
/// accurate iterations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSummary {
    pub u: Vec<bool>,
    /// `None` where no trial value was drawn (zero model gradient).
    pub v: Vec<Option<bool>>,
    pub u_frequency: f64,
    pub v_frequency: f64,
    /// Iterations meeting every premise of the success guarantee.
    pub guarantee_premises: usize,
    /// Iterations meeting the premises but unsuccessful.
    pub violations: Vec<usize>,
}

pub fn track_events(trace: &RunTrace, tc: &TheoryConstants) -> Result<EventSummary> {
    let pr = &tc.primitives;
    let c = pr.accuracy(1.0, 1.0);
    let mut u = Vec::with_capacity(trace.records.len());
    let mut v = Vec::with_capacity(trace.records.len());
    let mut premises = 0;
    let mut violations = Vec::new();
    for r in &trace.records {
        let ge = r.model_grad_error.ok_or(Error::MissingGroundTruth)?;
        let ve = r.model_value_error.ok_or(Error::MissingGroundTruth)?;
        let f = r.true_f.ok_or(Error::MissingGroundTruth)?;
        let grad = r.true_grad_norm.ok_or(Error::MissingGroundTruth)?;
        let mu = r.mu_before;
        let uj = ge <= c.kappa_eg / mu && ve <= c.kappa_ef / (mu * mu);
        let tol = c.eps_f / (mu * mu);
        let vj = match (r.f1, r.true_f_trial) {
            (Some(f1), Some(ft)) => Some((r.f0 - f).abs() <= tol && (f1 - ft).abs() <= tol),
            _ => None,
        };
        if uj && vj == Some(true) && grad > 0.0 && r.g_norm > 0.0 && mu >= tc.base.kappa_mu_g / r.g_norm {
            premises += 1;
            if !r.success {
                violations.push(r.iter);
            }
        }
        u.push(uj);
        v.push(vj);
    }
    let n = u.len().max(1) as f64;
    let v_drawn: Vec<bool> = v.iter().flatten().copied().collect();
    Ok(EventSummary {
        u_frequency: u.iter().filter(|b| **b).count() as f64 / n,
        v_frequency: v_drawn.iter().filter(|b| **b).count() as f64 / v_drawn.len().max(1) as f64,
        u,
        v,
        guarantee_premises: premises,
        violations,
    })
}

/// Mean with standard error and a normal 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std_err = (var / n.max(1) as f64).sqrt();
        Self {
            mean,
            std_err,
            ci_low: mean - 1.96 * std_err,
            ci_high: mean + 1.96 * std_err,
            samples: n,
        }
    }
}

/// `(Φ_{j+1} − Φ_j)μ_j²` for every iteration of a trace.
pub fn phi_increments(trace: &RunTrace, tau: f64) -> Result<Vec<f64>> {
    let recs = &trace.records;
    let mut out = Vec::with_capacity(recs.len());
    for (k, r) in recs.iter().enumerate() {
        let f = r.true_f.ok_or(Error::MissingGroundTruth)?;
        let f_next = match recs.get(k + 1) {
            Some(n) => n.true_f.ok_or(Error::MissingGroundTruth)?,
            None => trace.final_true_f.ok_or(Error::MissingGroundTruth)?,
        };
        let d = phi(f_next, r.mu_after, tau)? - phi(f, r.mu_before, tau)?;
        out.push(d * r.mu_before * r.mu_before);
    }
    Ok(out)
}

/// Pooled estimate of `E[(Φ_{j+1} − Φ_j)μ_j²]`. Each replication
/// contributes the mean over its own iterations, so the interval treats
/// replications as the independent units.
pub fn phi_decrease_check(traces: &[RunTrace], tau: f64) -> Result<MeanEstimate> {
    let mut per_rep = Vec::with_capacity(traces.len());
    for t in traces {
        let inc = phi_increments(t, tau)?;
        if !inc.is_empty() {
            per_rep.push(inc.iter().sum::<f64>() / inc.len() as f64);
        }
    }
    if per_rep.len() < 2 {
        return Err(Error::TooFewSamples {
            got: per_rep.len(),
            min: 2,
        });
    }
    Ok(MeanEstimate::from_samples(&per_rep))
}

/// Largest `Φ_j` along a trace.
pub fn max_phi(trace: &RunTrace, tau: f64) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for r in &trace.records {
        best = best.max(phi(r.true_f.ok_or(Error::MissingGroundTruth)?, r.mu_before, tau)?);
    }
    if let Some(f) = trace.final_true_f {
        best = best.max(phi(f, trace.mu_final, tau)?);
    }
    Ok(best)
}

/// Renewal times `A_i = min{k > A_{i−1} : μ_k ≤ μ_ε}`, `A_0 = 0`.
pub fn renewal_times(mus: &[f64], mu_eps: f64) -> Vec<usize> {
    let mut times = vec![0];
    times.extend(mus.iter().enumerate().skip(1).filter(|(_, m)| **m <= mu_eps).map(|(k, _)| k));
    times
}

/// `N(j) = max{i : A_i ≤ j}`.
pub fn renewal_count(times: &[usize], j: usize) -> usize {
    times.partition_point(|a| *a <= j).saturating_sub(1)
}

/// Checks that every `μ` equals `μ₀λ^k` for an integer `k`, up to `rel_tol`
/// (zero for an exact check), and is not below `μ_min`.
pub fn on_mu_lattice(mus: &[f64], mu0: f64, lambda: f64, mu_min: f64, rel_tol: f64) -> bool {
    mus.iter().all(|&mu| {
        let k = ((mu / mu0).ln() / lambda.ln()).round() as i32;
        let node = mu0 * lambda.powi(k);
        mu >= mu_min * (1.0 - rel_tol) && (mu - node).abs() <= rel_tol * node
    })
}

/// Dense-sampling lower estimate of the Lipschitz constant of `∇f` on the
/// ball of `radius` around `center`.
pub fn sampled_gradient_lipschitz<P, R>(
    problem: &P,
    center: &DVector<f64>,
    radius: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<f64>
where
    P: ResidualProblem + ?Sized,
    R: Rng + ?Sized,
{
    let n = center.len();
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let a = center + DVector::from_fn(n, |_, _| radius * rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
        let b = center + DVector::from_fn(n, |_, _| radius * rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
        let d = (&a - &b).norm();
        if d > 0.0 {
            best = best.max((problem.gradient(&a)? - problem.gradient(&b)?).norm() / d);
        }
    }
    Ok(best)
}

/// Largest sampled `‖J(x)‖` on the same kind of ball.
pub fn sampled_jacobian_bound<P, R>(
    problem: &P,
    center: &DVector<f64>,
    radius: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    P: ResidualProblem + ?Sized,
    R: Rng + ?Sized,
{
    let n = center.len();
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let x = center + DVector::from_fn(n, |_, _| radius * rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
        best = best.max(crate::linalg::spectral_norm_exact(&problem.jacobian(&x)?));
    }
    Ok(best)
}

/// Outcome of one replication at one `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Replication {
    pub epsilon: f64,
    pub replication: usize,
    /// Hitting time, or the number of iterations run when `capped`.
    pub t_eps: usize,
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub mean_t: MeanEstimate,
    pub capped: usize,
    /// More than 5% of replications capped; excluded from the slope fit.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityEstimate {
    pub replications: usize,
    pub rows: Vec<Replication>,
    pub summaries: Vec<EpsilonSummary>,
    /// Least-squares slope of `ln mean T_ε` against `ln(1/ε)`.
    pub fitted_slope: Option<f64>,
}

/// Runs `replications` independent solves per `ε` concurrently.
///
/// `solve(ε, seed)` must stop at `‖∇f‖ ≤ ε` (a run whose `hitting_time` is
/// `None` counts as capped). Seeds are derived from `(master_seed, ε index,
/// replication)` and results are returned in grid order regardless of
/// scheduling.
pub fn estimate_t_epsilon<F>(
    solve: F,
    epsilon_grid: &[f64],
    replications: usize,
    master_seed: u64,
) -> Result<ComplexityEstimate>
where
    F: Fn(f64, u64) -> Result<RunTrace> + Sync,
{
    if replications == 0 || epsilon_grid.is_empty() {
        return Err(Error::InvalidConfig("need at least one ε and one replication".into()));
    }
    let cells: Vec<(usize, usize)> = (0..epsilon_grid.len())
        .flat_map(|e| (0..replications).map(move |r| (e, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(e, r)| {
            let eps = epsilon_grid[e];
            let seed = derive_path(master_seed, &[e as u64, r as u64]);
            let trace = solve(eps, seed)?;
            Ok(Replication {
                epsilon: eps,
                replication: r,
                t_eps: trace.hitting_time.unwrap_or(trace.iterations()),
                capped: trace.hitting_time.is_none(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries: Vec<EpsilonSummary> = epsilon_grid
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let chunk = &rows[e * replications..(e + 1) * replications];
            let ts: Vec<f64> = chunk.iter().map(|r| r.t_eps as f64).collect();
            let capped = chunk.iter().filter(|r| r.capped).count();
            EpsilonSummary {
                epsilon: eps,
                mean_t: MeanEstimate::from_samples(&ts),
                capped,
                excluded: capped as f64 > 0.05 * replications as f64,
            }
        })
        .collect();

    let pts: Vec<(f64, f64)> = summaries
        .iter()
        .filter(|s| !s.excluded && s.mean_t.mean > 0.0)
        .map(|s| ((1.0 / s.epsilon).ln(), s.mean_t.mean.ln()))
        .collect();
    Ok(ComplexityEstimate {
        replications,
        rows,
        summaries,
        fitted_slope: fit_slope(&pts),
    })
}

/// Ordinary least-squares slope; `None` with fewer than two distinct abscissae.
pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}
