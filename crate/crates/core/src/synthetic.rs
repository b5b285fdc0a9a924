//! A small noisy quadratic with certified constants, used for the theory
//! checks: `r(x) = diag(d)(x − target)` observed through a [`GaussianOracle`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{TheoryConstants, TheoryPrimitives};
use crate::error::Result;
use crate::lm::{self, RunTrace, SolverConfig};
use crate::oracles::{AccuracyConstants, GaussianOracle};
use crate::problem::LinearLeastSquares;
use crate::subproblem::{StepContract, SubproblemSolver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub diagonal: Vec<f64>,
    pub target: Vec<f64>,
    pub x0: Vec<f64>,
    pub kappa_ef: f64,
    pub kappa_eg: f64,
    pub eps_f: f64,
    pub p: f64,
    pub q: f64,
    /// Entrywise Jacobian noise at `μ = 1`.
    pub jac_noise: f64,
    /// Spectral cap on model Jacobians; also the certified `κ_Jm`.
    pub jac_cap: Option<f64>,
    pub solver: SolverConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            diagonal: vec![1.0, 0.5],
            target: vec![1.0, 1.0],
            x0: vec![5.0, -3.0],
            kappa_ef: 0.1,
            kappa_eg: 0.1,
            eps_f: 0.01,
            p: 0.9,
            q: 0.9,
            jac_noise: 0.0,
            jac_cap: None,
            solver: SolverConfig {
                // Keeps every μ on the lattice μ₀λᵏ over long runs.
                mu_min: 2f64.powi(-50),
                max_iters: 20_000,
                ..SolverConfig::default()
            },
        }
    }
}

impl SyntheticConfig {
    pub fn accuracy(&self) -> AccuracyConstants {
        AccuracyConstants {
            kappa_ef: self.kappa_ef,
            kappa_eg: self.kappa_eg,
            eps_f: self.eps_f,
            p: self.p,
            q: self.q,
        }
    }

    pub fn problem(&self) -> Result<LinearLeastSquares> {
        LinearLeastSquares::diagonal(&self.diagonal, &self.target)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn primitives(&self) -> Result<TheoryPrimitives> {
        let jac_cap = if self.jac_noise > 0.0 { self.jac_cap } else { None };
        TheoryPrimitives::for_linear(
            &self.problem()?,
            &self.x0(),
            &self.accuracy(),
            &self.solver,
            &StepContract::DECLARED,
            jac_cap,
        )
    }

    pub fn theory(&self, epsilon: f64) -> Result<TheoryConstants> {
        TheoryConstants::for_epsilon(self.primitives()?, epsilon)
    }

    /// One seeded run with ground truth and accuracy events recorded,
    /// stopping at `‖∇f‖ ≤ grad_tol` when given.
    pub fn run(&self, seed: u64, grad_tol: Option<f64>) -> Result<RunTrace> {
        self.run_with(&self.solver.truncated_cg(), seed, grad_tol)
    }

    pub fn run_with<S: SubproblemSolver + ?Sized>(
        &self,
        subsolver: &S,
        seed: u64,
        grad_tol: Option<f64>,
    ) -> Result<RunTrace> {
        let problem = self.problem()?;
        let mut oracle = GaussianOracle::new(&problem, self.accuracy())?.with_jacobian_noise(self.jac_noise, self.jac_cap);
        let cfg = SolverConfig {
            grad_tol,
            event_thresholds: Some(self.accuracy()),
            ..self.solver.clone()
        };
        lm::run(Some(&problem), &mut oracle, subsolver, &cfg, self.x0(), seed)
    }
}
