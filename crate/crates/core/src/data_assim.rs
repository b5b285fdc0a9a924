//! Strong-constraint 4DVAR on Lorenz-63 with an ensemble background
//! covariance.
//!
//! The unknown is the initial state `x = z₀ ∈ R³`. The true objective is
//!
//! ```text
//! f(x) = ½‖x − z_b‖²_{(B∞)⁻¹} + ½‖y − H(x)‖²_{R⁻¹}
//! ```
//!
//! where `H` propagates `x` through the RK4-discretised Lorenz flow and
//! observes it at each observation time. Only an ensemble drawn around
//! `z_b` is available, so the solver sees the same objective with the
//! empirical covariance `B_N` in place of `B∞`.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite_vec, Error, Result};
use crate::linalg::{cholesky_factor, spd_inverse, spd_solve, sym_inv_sqrt};
use crate::lm::{run, RunTrace, SolverConfig};
use crate::oracles::{EstimateOracle, ModelDraw, ModelOracle};
use crate::problem::ResidualProblem;
use crate::rng::{derive_path, stream, StreamRng};
use crate::subproblem::ExactSolver;

/// Eigenvalue floor for `(B)^{-1/2}` in the stacked residual.
pub const PRECISION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub steps_per_window: usize,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            steps_per_window: 10,
        }
    }
}

impl Lorenz63Params {
    pub fn vector_field(&self, s: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            -self.sigma * (s.x - s.y),
            self.rho * s.x - s.y - s.x * s.z,
            s.x * s.y - self.beta * s.z,
        )
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn lorenz_rk4_step(state: &Vector3<f64>, p: &Lorenz63Params) -> Result<Vector3<f64>> {
    if !(p.dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Lorenz state"));
    }
    let h = p.dt;
    let k1 = p.vector_field(state);
    let k2 = p.vector_field(&(state + k1 * (h / 2.0)));
    let k3 = p.vector_field(&(state + k2 * (h / 2.0)));
    let k4 = p.vector_field(&(state + k3 * h));
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite("Lorenz propagation"))
    }
}

fn to_vec3(x: &DVector<f64>) -> Result<Vector3<f64>> {
    if x.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: x.len(),
        });
    }
    Ok(Vector3::new(x[0], x[1], x[2]))
}

/// Where and what is observed within the assimilation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSetup {
    /// Observe at steps `0, every, 2·every, … ≤ steps_per_window`.
    pub every: usize,
    /// Observed state coordinates.
    pub coordinates: Vec<usize>,
}

impl Default for ObservationSetup {
    fn default() -> Self {
        Self {
            every: 1,
            coordinates: vec![0, 1, 2],
        }
    }
}

impl ObservationSetup {
    pub fn times(&self, steps: usize) -> Vec<usize> {
        (0..=steps).step_by(self.every.max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.every == 0 || self.coordinates.is_empty() || self.coordinates.iter().any(|&c| c > 2) {
            return Err(Error::InvalidConfig(
                "observations need every ≥ 1 and coordinates within 0..3".into(),
            ));
        }
        Ok(())
    }
}

/// A strong-constraint 4DVAR instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DaProblem {
    pub params: Lorenz63Params,
    pub obs: ObservationSetup,
    pub z_b: DVector<f64>,
    pub b_inf: DMatrix<f64>,
    pub y: DVector<f64>,
    pub r: DMatrix<f64>,
    r_inv_sqrt: DMatrix<f64>,
}

impl DaProblem {
    pub fn new(
        params: Lorenz63Params,
        obs: ObservationSetup,
        z_b: DVector<f64>,
        b_inf: DMatrix<f64>,
        y: DVector<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        obs.validate()?;
        to_vec3(&z_b)?;
        let m = obs.times(params.steps_per_window).len() * obs.coordinates.len();
        if y.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: y.len(),
            });
        }
        if r.shape() != (m, m) || b_inf.shape() != (3, 3) {
            return Err(Error::InvalidConfig("R must be m×m and B∞ 3×3".into()));
        }
        cholesky_factor(&r, "observation covariance")?;
        cholesky_factor(&b_inf, "background covariance")?;
        let r_inv_sqrt = sym_inv_sqrt(&r, PRECISION_FLOOR);
        Ok(Self {
            params,
            obs,
            z_b,
            b_inf,
            y,
            r,
            r_inv_sqrt,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.y.len()
    }

    /// Stacked observations of the trajectory started at `z0`.
    pub fn forward_h(&self, z0: &DVector<f64>) -> Result<DVector<f64>> {
        let mut state = to_vec3(z0)?;
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        let coords = &self.obs.coordinates;
        let mut out = Vec::with_capacity(self.obs_dim());
        for k in 0..=self.params.steps_per_window {
            if k > 0 {
                state = lorenz_rk4_step(&state, &self.params)?;
            }
            if k % self.obs.every == 0 {
                out.extend(coords.iter().map(|&c| state[c]));
            }
        }
        Ok(DVector::from_vec(out))
    }

    /// Central finite differences with `h_i = max(1e-6, 1e-6|z_i|)`.
    pub fn jacobian_h(&self, z0: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.obs_dim(), 3);
        for i in 0..3 {
            let h = 1e-6_f64.max(1e-6 * z0[i].abs());
            let mut plus = z0.clone();
            plus[i] += h;
            let mut minus = z0.clone();
            minus[i] -= h;
            let col = (self.forward_h(&plus)? - self.forward_h(&minus)?) / (2.0 * h);
            jac.set_column(i, &col);
        }
        Ok(jac)
    }

    pub fn r_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.r_inv_sqrt
    }
}

/// A background covariance together with its inverse and inverse square root.
#[derive(Debug, Clone, PartialEq)]
pub struct Precision {
    pub cov: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl Precision {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let inv = spd_inverse(&cov, "background covariance")?;
        let inv_sqrt = sym_inv_sqrt(&cov, PRECISION_FLOOR);
        Ok(Self { cov, inv, inv_sqrt })
    }
}

/// `½‖x − z_b‖²_{cov⁻¹} + ½‖y − H(x)‖²_{R⁻¹}`.
pub fn da_objective(x: &DVector<f64>, problem: &DaProblem, cov: &DMatrix<f64>) -> Result<f64> {
    let d = x - &problem.z_b;
    let bg = spd_solve(cov, &d, "background covariance")?.dot(&d);
    let innov = problem.forward_h(x)? - &problem.y;
    let obs = spd_solve(&problem.r, &innov, "observation covariance")?.dot(&innov);
    Ok(0.5 * (bg + obs))
}

/// The objective with a given background covariance as a stacked residual
/// `[cov^{-1/2}(x − z_b); R^{-1/2}(H(x) − y)]`.
#[derive(Debug, Clone)]
pub struct DaResidual<'a> {
    pub problem: &'a DaProblem,
    pub precision: Precision,
}

impl<'a> DaResidual<'a> {
    pub fn new(problem: &'a DaProblem, cov: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            problem,
            precision: Precision::new(cov)?,
        })
    }

    /// The true objective, with `B∞`.
    pub fn truth(problem: &'a DaProblem) -> Result<Self> {
        Self::new(problem, problem.b_inf.clone())
    }
}

impl ResidualProblem for DaResidual<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        let bg = &self.precision.inv_sqrt * (x - &p.z_b);
        let obs = p.r_inv_sqrt() * (p.forward_h(x)? - &p.y);
        let mut r = DVector::zeros(3 + obs.len());
        r.rows_mut(0, 3).copy_from(&bg);
        r.rows_mut(3, obs.len()).copy_from(&obs);
        Ok(r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.problem;
        let jh = p.r_inv_sqrt() * p.jacobian_h(x)?;
        let mut j = DMatrix::zeros(3 + jh.nrows(), 3);
        j.view_mut((0, 0), (3, 3)).copy_from(&self.precision.inv_sqrt);
        j.view_mut((3, 0), (jh.nrows(), 3)).copy_from(&jh);
        Ok(j)
    }
}

/// How ensemble members are centred before forming `B_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Shift members so their mean is exactly `z_b`.
    Recentred,
    /// Use the draws as they are (anomalies about the known mean `z_b`).
    KnownMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub z_b: DVector<f64>,
    pub members: Vec<DVector<f64>>,
    /// Columns `(ẑᵏ − z_b)/√(N−1)`.
    pub anomalies: DMatrix<f64>,
    pub b_n: DMatrix<f64>,
}

impl Ensemble {
    pub fn from_members(z_b: DVector<f64>, mut members: Vec<DVector<f64>>, centering: Centering) -> Result<Self> {
        let n_members = members.len();
        if n_members < 2 {
            return Err(Error::EnsembleTooSmall {
                size: n_members,
                min: 2,
            });
        }
        let n = z_b.len();
        if let Some(m) = members.iter().find(|m| m.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: m.len(),
            });
        }
        if centering == Centering::Recentred {
            let mean = members.iter().fold(DVector::zeros(n), |acc, m| acc + m) / n_members as f64;
            let shift = &z_b - mean;
            for m in &mut members {
                *m += &shift;
            }
        }
        let scale = 1.0 / ((n_members - 1) as f64).sqrt();
        let mut anomalies = DMatrix::zeros(n, n_members);
        for (k, m) in members.iter().enumerate() {
            anomalies.set_column(k, &((m - &z_b) * scale));
        }
        let b_n = &anomalies * anomalies.transpose();
        Ok(Self {
            z_b,
            members,
            anomalies,
            b_n,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.iter().fold(DVector::zeros(self.z_b.len()), |acc, m| acc + m) / self.size() as f64
    }
}

/// Draws `N` members from `N(z_b, B∞)` and centres them.
///
/// Needs `N ≥ n + 1`, the smallest size for which `B_N` is nonsingular with
/// probability one in either centering.
pub fn sample_ensemble<R: Rng + ?Sized>(
    z_b: &DVector<f64>,
    b_inf: &DMatrix<f64>,
    size: usize,
    centering: Centering,
    rng: &mut R,
) -> Result<Ensemble> {
    let n = z_b.len();
    if size < n + 1 {
        return Err(Error::EnsembleTooSmall { size, min: n + 1 });
    }
    let l = cholesky_factor(b_inf, "background covariance")?;
    let members = (0..size)
        .map(|_| z_b + &l * DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ensemble::from_members(z_b.clone(), members, centering)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WishartReport {
    pub ensemble_size: usize,
    pub replications: usize,
    pub skipped: usize,
    /// `(N−1)/(N−1−n)` for known-mean sampling, `(N−1)/(N−2−n)` when recentred.
    pub expected_factor: f64,
    pub relative_error: f64,
}

/// Monte Carlo check of `E[(B_N)⁻¹] = factor · (B∞)⁻¹`.
pub fn wishart_inverse_mean_check<R: Rng + ?Sized>(
    b_inf: &DMatrix<f64>,
    size: usize,
    replications: usize,
    centering: Centering,
    rng: &mut R,
) -> Result<WishartReport> {
    let n = b_inf.nrows();
    let dof = match centering {
        Centering::KnownMean => size,
        Centering::Recentred => size - 1,
    };
    if dof < n + 2 {
        let min = match centering {
            Centering::KnownMean => n + 2,
            Centering::Recentred => n + 3,
        };
        return Err(Error::EnsembleTooSmall { size, min });
    }
    let expected_factor = (size - 1) as f64 / (dof - n - 1) as f64;
    let z = DVector::zeros(n);
    let mut sum = DMatrix::zeros(n, n);
    let mut used = 0usize;
    let mut skipped = 0usize;
    for _ in 0..replications {
        let e = sample_ensemble(&z, b_inf, size, centering, rng)?;
        match spd_inverse(&e.b_n, "ensemble covariance") {
            Ok(inv) => {
                sum += inv;
                used += 1;
            }
            Err(_) => {
                log::warn!("singular ensemble covariance; replication skipped");
                skipped += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    let target = spd_inverse(b_inf, "background covariance")? * expected_factor;
    let mean = sum / used as f64;
    Ok(WishartReport {
        ensemble_size: size,
        replications: used,
        skipped,
        expected_factor,
        relative_error: (mean - &target).norm() / target.norm(),
    })
}

/// `K = B Hᵀ(H B Hᵀ + R)⁻¹`.
pub fn enkf_gain(b: &DMatrix<f64>, jh: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = jh * b * jh.transpose() + r;
    let chol = s.cholesky().ok_or(Error::Singular("innovation covariance"))?;
    // K = (S⁻¹ H B)ᵀ since S and B are symmetric.
    Ok(chol.solve(&(jh * b)).transpose())
}

/// EnKF mean update `s = z_b − x + K(y − H(x) − H'(x)(z_b − x))`.
pub fn enkf_mean_update(
    problem: &DaProblem,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let hx = problem.forward_h(x)?;
    let jh = problem.jacobian_h(x)?;
    let k = enkf_gain(b, &jh, &problem.r)?;
    let db = &problem.z_b - x;
    Ok(&db + k * (&problem.y - hx - &jh * &db))
}

/// Per-member EnKF analysis increments
/// `s^k = ẑᵏ − x + K(y − H(x) − H'(x)(ẑᵏ − x) − v̂ᵏ)` with centred
/// observation perturbations `v̂ᵏ ~ N(0, R)`.
pub fn enkf_member_updates<R: Rng + ?Sized>(
    problem: &DaProblem,
    x: &DVector<f64>,
    ensemble: &Ensemble,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let hx = problem.forward_h(x)?;
    let jh = problem.jacobian_h(x)?;
    let k = enkf_gain(&ensemble.b_n, &jh, &problem.r)?;
    let m = problem.obs_dim();
    let lr = cholesky_factor(&problem.r, "observation covariance")?;
    let mut v: Vec<DVector<f64>> = (0..ensemble.size())
        .map(|_| &lr * DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let vbar = v.iter().fold(DVector::zeros(m), |a, b| a + b) / v.len() as f64;
    v.iter_mut().for_each(|vk| *vk -= &vbar);
    Ok(ensemble
        .members
        .iter()
        .zip(&v)
        .map(|(zk, vk)| {
            let d = zk - x;
            &d + &k * (&problem.y - &hx - &jh * &d - vk)
        })
        .collect())
}

/// Exact minimiser of the regularised linearised subproblem
/// `½‖s + x − z_b‖²_{B⁻¹} + ½‖y − H(x) − H's‖²_{R⁻¹} + ½γ‖s‖²`.
pub fn solve_da_subproblem(
    problem: &DaProblem,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig("γ must be non-negative".into()));
    }
    let b_inv = spd_inverse(b, "background covariance")?;
    let r_inv = spd_inverse(&problem.r, "observation covariance")?;
    let jh = problem.jacobian_h(x)?;
    let innov = problem.forward_h(x)? - &problem.y;
    let g = &b_inv * (x - &problem.z_b) + jh.transpose() * &r_inv * innov;
    let h = b_inv + jh.transpose() * r_inv * &jh + DMatrix::identity(3, 3) * gamma;
    spd_solve(&h, &(-g), "subproblem system")
}

/// Whether the ensemble is redrawn every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Fixed,
    ResamplePerIteration,
}

/// Model and estimate oracle induced by an ensemble covariance.
///
/// `f⁰`, `f¹` and `m(x)` are all the `B_N` objective, so `m(x) = f⁰`, and the
/// model is its Gauss-Newton model. Without an ensemble size (`N = ∞`) the
/// oracle is exact. The ensemble is drawn when the oracle is reseeded, and
/// again at every `estimate_center` under
/// [`EnsembleMode::ResamplePerIteration`].
#[derive(Debug, Clone)]
pub struct DaOracle<'a> {
    problem: &'a DaProblem,
    size: Option<usize>,
    mode: EnsembleMode,
    pinned: bool,
    rng: StreamRng,
    current: DaResidual<'a>,
}

impl<'a> DaOracle<'a> {
    pub fn new(problem: &'a DaProblem, size: Option<usize>, mode: EnsembleMode) -> Result<Self> {
        let mut this = Self {
            problem,
            size,
            mode,
            pinned: false,
            rng: stream(0),
            current: DaResidual::truth(problem)?,
        };
        this.redraw()?;
        Ok(this)
    }

    /// Uses `ensemble` for the whole run, regardless of reseeding.
    pub fn with_ensemble(problem: &'a DaProblem, ensemble: &Ensemble) -> Result<Self> {
        Ok(Self {
            problem,
            size: Some(ensemble.size()),
            mode: EnsembleMode::Fixed,
            pinned: true,
            rng: stream(0),
            current: DaResidual::new(problem, ensemble.b_n.clone())?,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.current.precision.cov
    }

    pub fn residual(&self) -> &DaResidual<'a> {
        &self.current
    }

    fn redraw(&mut self) -> Result<()> {
        if self.pinned {
            return Ok(());
        }
        if let Some(size) = self.size {
            let p = self.problem;
            let e = sample_ensemble(&p.z_b, &p.b_inf, size, Centering::Recentred, &mut self.rng)?;
            self.current = DaResidual::new(p, e.b_n)?;
        }
        Ok(())
    }
}

impl ModelOracle for DaOracle<'_> {
    fn reseed(&mut self, seed: u64) {
        self.rng = stream(seed);
        if let Err(e) = self.redraw() {
            log::warn!("ensemble redraw failed on reseed: {e}");
        }
    }

    fn draw_model(&mut self, x: &DVector<f64>, _mu: f64) -> Result<ModelDraw> {
        let r = self.current.residual(x)?;
        ensure_finite_vec(&r, "residual")?;
        let jac = self.current.jacobian(x)?;
        Ok(ModelDraw {
            g: jac.tr_mul(&r),
            jac,
            m_at_center: 0.5 * r.norm_squared(),
        })
    }
}

impl EstimateOracle for DaOracle<'_> {
    fn estimate_center(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        if self.mode == EnsembleMode::ResamplePerIteration {
            self.redraw()?;
        }
        self.current.objective(x)
    }

    fn estimate_trial(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        self.current.objective(x)
    }
}

/// Inputs of the Chebyshev accuracy bounds at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevInput<'a> {
    pub problem: &'a DaProblem,
    pub x: DVector<f64>,
    pub x_trial: DVector<f64>,
    pub iteration: usize,
    pub mu0: f64,
    pub lambda: f64,
    pub mu_max: f64,
    pub kappa_ef: f64,
    pub kappa_eg: f64,
    pub eps_f: f64,
    pub ensemble_size: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChebyshevReport {
    /// `min{λʲμ₀, μ_max}`.
    pub mu_bar: f64,
    pub theta: f64,
    pub theta_trial: f64,
    pub upsilon: f64,
    pub upsilon_grad: f64,
    pub var_center: f64,
    pub var_trial: f64,
    pub lambda_max: f64,
    /// Lower bound on `P(V_j)`; `None` when a denominator is not positive.
    pub q_lower: Option<f64>,
    /// Lower bound on `P(U_j)`; `None` when a denominator is not positive.
    pub p_lower: Option<f64>,
}

/// Chebyshev lower bounds on the accuracy probabilities of the ensemble
/// oracle at a fixed iterate.
///
/// The variances of `‖x − z_b‖²_{B_N⁻¹}`, `‖x + s − z_b‖²_{B_N⁻¹}` and the
/// covariance of `B_N⁻¹(x − z_b)` are estimated from `resamples` fresh
/// recentred ensembles.
pub fn chebyshev_accuracy_bounds<R: Rng + ?Sized>(input: &ChebyshevInput<'_>, rng: &mut R) -> Result<ChebyshevReport> {
    if input.resamples < 2 {
        return Err(Error::TooFewSamples {
            got: input.resamples,
            min: 2,
        });
    }
    let p = input.problem;
    let n = 3usize;
    let size = input.ensemble_size;
    if size <= n + 1 {
        return Err(Error::EnsembleTooSmall { size, min: n + 2 });
    }
    let d0 = &input.x - &p.z_b;
    let d1 = &input.x_trial - &p.z_b;
    let mut q0 = Vec::with_capacity(input.resamples);
    let mut q1 = Vec::with_capacity(input.resamples);
    let mut gs = Vec::with_capacity(input.resamples);
    for _ in 0..input.resamples {
        let e = sample_ensemble(&p.z_b, &p.b_inf, size, Centering::Recentred, rng)?;
        let inv = spd_inverse(&e.b_n, "ensemble covariance")?;
        q0.push(d0.dot(&(&inv * &d0)));
        q1.push(d1.dot(&(&inv * &d1)));
        gs.push(&inv * &d0);
    }
    let var_center = sample_variance(&q0);
    let var_trial = sample_variance(&q1);
    let m = gs.len() as f64;
    let gmean = gs.iter().fold(DVector::zeros(n), |a, g| a + g) / m;
    let cov = gs.iter().fold(DMatrix::zeros(n, n), |a, g| {
        let c = g - &gmean;
        a + &c * c.transpose()
    }) / (m - 1.0);
    let lambda_max = cov.symmetric_eigen().eigenvalues.max();

    let b_inf_inv = spd_inverse(&p.b_inf, "background covariance")?;
    let w = n as f64 / (size - 1 - n) as f64;
    let mu_bar = (input.lambda.powi(input.iteration as i32) * input.mu0).min(input.mu_max);
    let mb2 = mu_bar * mu_bar;
    let norm0 = d0.dot(&(&b_inf_inv * &d0));
    let norm1 = d1.dot(&(&b_inf_inv * &d1));
    let theta = 2.0 * input.eps_f / mb2 - w * norm0;
    let theta_trial = 2.0 * input.eps_f / mb2 - w * norm1;
    let upsilon = 2.0 * input.kappa_ef / mb2 - w * norm0;
    let upsilon_grad = input.kappa_eg / mu_bar - w * (&b_inf_inv * &d0).norm();
    let q_lower = (theta > 0.0 && theta_trial > 0.0)
        .then(|| 1.0 - var_center / (theta * theta) - var_trial / (theta_trial * theta_trial));
    let p_lower = (upsilon > 0.0 && upsilon_grad > 0.0)
        .then(|| 1.0 - var_center / (upsilon * upsilon) - n as f64 * lambda_max / (upsilon_grad * upsilon_grad));
    Ok(ChebyshevReport {
        mu_bar,
        theta,
        theta_trial,
        upsilon,
        upsilon_grad,
        var_center,
        var_trial,
        lambda_max,
        q_lower,
        p_lower,
    })
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// How the twin experiment generates observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YMode {
    /// `y ~ N(0, R)`.
    NoiseOnly,
    /// `y = H(z_true) + N(0, R)` with `z_true ~ N(z_b, B∞)`.
    TruthPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub lorenz: Lorenz63Params,
    pub observations: ObservationSetup,
    /// `R = r_scale · I`.
    pub r_scale: f64,
    /// `B∞ = σ_b² I`.
    pub sigma_b: f64,
    /// Ensemble sizes; `null` stands for `N = ∞` (use `B∞`).
    pub ensemble_sizes: Vec<Option<usize>>,
    /// Replicate indices; each one draws its own `z_b`, `y` and ensembles.
    pub seeds: Vec<u64>,
    pub y_mode: YMode,
    pub ensemble_mode: EnsembleMode,
    pub solver: SolverConfig,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            lorenz: Lorenz63Params::default(),
            observations: ObservationSetup::default(),
            r_scale: 0.1,
            sigma_b: 1.0,
            ensemble_sizes: vec![Some(4), Some(100), Some(1000), None],
            seeds: (0..10).collect(),
            y_mode: YMode::NoiseOnly,
            ensemble_mode: EnsembleMode::Fixed,
            solver: SolverConfig::default(),
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.observations.validate()?;
        if !(self.r_scale > 0.0 && self.sigma_b > 0.0 && self.lorenz.dt > 0.0) {
            return Err(Error::InvalidConfig("r_scale, sigma_b and dt must be positive".into()));
        }
        if self.ensemble_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one ensemble size and one seed".into()));
        }
        if let Some(&Some(n)) = self.ensemble_sizes.iter().find(|s| matches!(s, Some(n) if *n < 4)) {
            return Err(Error::EnsembleTooSmall { size: n, min: 4 });
        }
        Ok(())
    }

    /// Draws `z_b` and `y` for one replicate.
    pub fn problem(&self, seed: u64) -> Result<DaProblem> {
        let mut rng = stream(seed);
        let b_inf = DMatrix::identity(3, 3) * self.sigma_b.powi(2);
        let z_b = DVector::from_fn(3, |_, _| self.sigma_b * rng.sample::<f64, _>(StandardNormal));
        let m = self.observations.times(self.lorenz.steps_per_window).len() * self.observations.coordinates.len();
        let r = DMatrix::identity(m, m) * self.r_scale;
        let noise = DVector::from_fn(m, |_, _| self.r_scale.sqrt() * rng.sample::<f64, _>(StandardNormal));
        let y = match self.y_mode {
            YMode::NoiseOnly => noise,
            YMode::TruthPlusNoise => {
                let z_true = &z_b + DVector::from_fn(3, |_, _| self.sigma_b * rng.sample::<f64, _>(StandardNormal));
                let probe = DaProblem::new(
                    self.lorenz,
                    self.observations.clone(),
                    z_b.clone(),
                    b_inf.clone(),
                    DVector::zeros(m),
                    r.clone(),
                )?;
                probe.forward_h(&z_true)? + noise
            }
        };
        DaProblem::new(self.lorenz, self.observations.clone(), z_b, b_inf, y, r)
    }
}

/// One `(seed, N)` run of the twin experiment.
#[derive(Debug, Clone)]
pub struct TwinCell {
    pub seed: u64,
    pub ensemble_size: Option<usize>,
    pub trace: RunTrace,
    /// Distance from this run's final iterate to the `N = ∞` final iterate
    /// of the same seed, when that run is part of the grid.
    pub distance_to_inf: Option<f64>,
}

/// A `(seed, N)` cell that did not complete.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinFailure {
    pub seed: u64,
    pub ensemble_size: Option<usize>,
    pub error: Error,
}

fn twin_cell(cfg: &TwinConfig, master_seed: u64, seed: u64, size: Option<usize>) -> Result<TwinCell> {
    let problem = cfg.problem(derive_path(master_seed, &[seed, 0]))?;
    let truth = DaResidual::truth(&problem)?;
    let mut oracle = DaOracle::new(&problem, size, cfg.ensemble_mode)?;
    let run_seed = derive_path(master_seed, &[seed, 1, size.map_or(0, |n| n as u64)]);
    let trace = run(
        Some(&truth),
        &mut oracle,
        &ExactSolver,
        &cfg.solver,
        problem.z_b.clone(),
        run_seed,
    )?;
    Ok(TwinCell {
        seed,
        ensemble_size: size,
        trace,
        distance_to_inf: None,
    })
}

/// Runs every `(seed, N)` cell concurrently, starting from `z_b`, and keeps
/// going past failed cells. Completed cells come back ordered by seed, then
/// by position in `ensemble_sizes`.
pub fn twin_experiment_partial(cfg: &TwinConfig, master_seed: u64) -> Result<(Vec<TwinCell>, Vec<TwinFailure>)> {
    cfg.validate()?;
    let cells: Vec<(u64, Option<usize>)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.ensemble_sizes.iter().map(move |&n| (s, n)))
        .collect();
    let outcomes: Vec<_> = cells
        .par_iter()
        .map(|&(seed, size)| (seed, size, twin_cell(cfg, master_seed, seed, size)))
        .collect();

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (seed, ensemble_size, outcome) in outcomes {
        match outcome {
            Ok(cell) => done.push(cell),
            Err(error) => failures.push(TwinFailure {
                seed,
                ensemble_size,
                error,
            }),
        }
    }
    let mut start = 0;
    while start < done.len() {
        let seed = done[start].seed;
        let end = start + done[start..].iter().take_while(|c| c.seed == seed).count();
        let group = &mut done[start..end];
        let inf = group
            .iter()
            .find(|c| c.ensemble_size.is_none())
            .map(|c| c.trace.x_final.clone());
        if let Some(x_inf) = inf {
            for c in group.iter_mut() {
                c.distance_to_inf = Some((&c.trace.x_final - &x_inf).norm());
            }
        }
        start = end;
    }
    Ok((done, failures))
}

/// As [`twin_experiment_partial`], failing on the first failed cell.
pub fn twin_experiment(cfg: &TwinConfig, master_seed: u64) -> Result<Vec<TwinCell>> {
    let (cells, failures) = twin_experiment_partial(cfg, master_seed)?;
    match failures.into_iter().next() {
        Some(f) => Err(f.error),
        None => Ok(cells),
    }
}
