//! Approximate minimization of the regularized Gauss-Newton model.
//!
//! The system `(JᵀJ + γI)s = −g` is strictly convex whenever `γ > 0`, so
//! plain conjugate gradients from `s = 0` needs no boundary or
//! negative-curvature handling. Starting at zero makes the first CG iterate
//! the Cauchy point and every later iterate decreases the model further,
//! which is what certifies the fraction-of-Cauchy-decrease constant
//! `θ_fcd = 1`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lm::ModelSnapshot;

/// Step-quality constants a subsolver promises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepContract {
    /// Fraction of Cauchy decrease.
    pub theta_fcd: f64,
    /// Constant of the `|sᵀ(γs + g)|` bound.
    pub theta_in: f64,
}

impl StepContract {
    /// The contract declared for [`TruncatedCg`] and [`ExactSolver`].
    pub const DECLARED: StepContract = StepContract {
        theta_fcd: 1.0,
        theta_in: 2.0,
    };
}

pub trait SubproblemSolver: Sync {
    fn solve(&self, snap: &ModelSnapshot) -> Result<DVector<f64>>;

    fn contract(&self) -> StepContract {
        StepContract::DECLARED
    }
}

/// Truncated CG started at the zero vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedCg {
    /// Stop when `‖residual‖ ≤ tol·‖g‖`.
    pub tol: f64,
    /// Defaults to the dimension.
    pub max_iters: Option<usize>,
}

impl Default for TruncatedCg {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: None,
        }
    }
}

impl SubproblemSolver for TruncatedCg {
    fn solve(&self, snap: &ModelSnapshot) -> Result<DVector<f64>> {
        let n = snap.dim();
        solve_cg(snap, self.tol, self.max_iters.unwrap_or(n))
    }
}

/// Dense Cholesky solve of the full system.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExactSolver;

impl SubproblemSolver for ExactSolver {
    fn solve(&self, snap: &ModelSnapshot) -> Result<DVector<f64>> {
        solve_exact(snap)
    }
}

/// Output of [`solve_cg_traced`].
#[derive(Debug, Clone)]
pub struct CgReport {
    pub step: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Model decrease `m(x) − m(x+s_k)` after each CG iteration.
    pub decreases: Vec<f64>,
}

pub fn solve_cg(snap: &ModelSnapshot, tol: f64, max_iters: usize) -> Result<DVector<f64>> {
    solve_cg_traced(snap, tol, max_iters).map(|r| r.step)
}

/// CG on `(JᵀJ + γI)s = −g` from `s = 0`, recording the model decrease of
/// every iterate.
pub fn solve_cg_traced(snap: &ModelSnapshot, tol: f64, max_iters: usize) -> Result<CgReport> {
    let n = snap.dim();
    let g_norm = snap.g.norm();
    if g_norm == 0.0 {
        return Err(Error::Numerical("CG called with zero model gradient".into()));
    }
    if !(snap.gamma > 0.0) {
        return Err(Error::Numerical("CG needs gamma > 0".into()));
    }
    let mut s = DVector::zeros(n);
    let mut r = -&snap.g;
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let threshold = tol * g_norm;
    let mut decreases = Vec::new();
    let mut k = 0;
    while k < max_iters && rr.sqrt() > threshold {
        let ap = snap.hess_vec(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(Error::Numerical(format!(
                "non-positive curvature {curvature:e} along CG direction"
            )));
        }
        let alpha = rr / curvature;
        s.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_next = r.norm_squared();
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
        k += 1;
        decreases.push(snap.decrease(&s));
    }
    Ok(CgReport {
        step: s,
        iterations: k,
        residual_norm: rr.sqrt(),
        decreases,
    })
}

/// Dense solve of `(JᵀJ + γI)s = −g`.
pub fn solve_exact(snap: &ModelSnapshot) -> Result<DVector<f64>> {
    if !(snap.gamma > 0.0) {
        return Err(Error::Numerical("exact solve needs gamma > 0".into()));
    }
    linalg::spd_solve(&snap.hessian(), &(-&snap.g), "regularized Gauss-Newton matrix")
}

/// `−t g` with `t = ‖g‖² / gᵀ(JᵀJ + γI)g`.
pub fn cauchy_point(snap: &ModelSnapshot) -> Result<DVector<f64>> {
    let gg = snap.g.norm_squared();
    if gg == 0.0 {
        return Err(Error::Numerical("Cauchy point of a zero gradient".into()));
    }
    let curvature = snap.g.dot(&snap.hess_vec(&snap.g));
    if !(curvature > 0.0) {
        return Err(Error::Numerical("non-positive curvature along -g".into()));
    }
    Ok(&snap.g * (-gg / curvature))
}

/// How a step measures up against the three step bounds.
///
/// Each ratio is the left side divided by the bound, so a value `≤ 1`
/// means the bound holds (`decrease_ratio` is inverted: bound over
/// achieved decrease).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractCheck {
    /// `(θ_fcd/2)·‖g‖²/(‖J‖² + γ)` divided by the achieved decrease.
    pub decrease_ratio: f64,
    /// `‖s‖·μ / 2`.
    pub step_size_ratio: f64,
    /// `|sᵀ(γs + g)|·μ² / (4‖J‖² + 2θ_in)`.
    pub product_ratio: f64,
    pub jac_norm: f64,
    pub decrease_ok: bool,
    pub step_size_ok: bool,
    pub product_ok: bool,
}

impl ContractCheck {
    pub fn ok(&self) -> bool {
        self.decrease_ok && self.step_size_ok && self.product_ok
    }
}

/// Relative rounding allowance for the decrease and product comparisons.
const ROUNDING: f64 = 1e-12;

/// Evaluates the step bounds for `s` using a power-iteration `‖J‖`.
pub fn check_contract(snap: &ModelSnapshot, s: &DVector<f64>, contract: &StepContract) -> ContractCheck {
    let jac_norm = linalg::spectral_norm_default(&snap.jac);
    let jj = jac_norm * jac_norm;
    let g2 = snap.g.norm_squared();
    let mu = snap.mu;

    let decrease = snap.decrease(s);
    let required = 0.5 * contract.theta_fcd * g2 / (jj + snap.gamma);
    let decrease_ratio = required / decrease;
    let decrease_ok = decrease >= required * (1.0 - ROUNDING);

    let size = s.norm() * mu;
    let step_size_ratio = size / 2.0;
    let step_size_ok = size <= 2.0 + 1e-12;

    let product = s.dot(&(s * snap.gamma + &snap.g)).abs() * mu * mu;
    let product_bound = 4.0 * jj + 2.0 * contract.theta_in;
    let product_ratio = product / product_bound;
    let product_ok = product <= product_bound * (1.0 + ROUNDING);

    ContractCheck {
        decrease_ratio,
        step_size_ratio,
        product_ratio,
        jac_norm,
        decrease_ok,
        step_size_ok,
        product_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn snap(g: &[f64], jac: DMatrix<f64>, gamma: f64) -> ModelSnapshot {
        let g = DVector::from_column_slice(g);
        let mu = gamma / g.norm();
        ModelSnapshot::new(DVector::zeros(g.len()), 0.0, g, jac, mu).unwrap()
    }

    #[test]
    fn cg_identity_example() {
        let s = snap(&[2.0, 0.0], DMatrix::identity(2, 2), 1.0);
        let step = solve_cg(&s, 1e-10, 2).unwrap();
        assert_eq!(step, DVector::from_vec(vec![-1.0, 0.0]));
        let report = solve_cg_traced(&s, 1e-10, 2).unwrap();
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn exact_examples() {
        let s = snap(&[4.0, 0.0], DMatrix::zeros(3, 2), 2.0);
        let step = solve_exact(&s).unwrap();
        assert!((step - DVector::from_vec(vec![-2.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn cauchy_examples() {
        let s = snap(&[1.0, 0.0], DMatrix::zeros(2, 2), 1.0);
        assert_eq!(cauchy_point(&s).unwrap(), DVector::from_vec(vec![-1.0, 0.0]));
        let s = snap(&[0.0, 3.0], DMatrix::identity(2, 2), 1.0);
        assert_eq!(cauchy_point(&s).unwrap(), DVector::from_vec(vec![0.0, -1.5]));
        let z = ModelSnapshot::new(DVector::zeros(2), 0.0, DVector::zeros(2), DMatrix::zeros(2, 2), 1.0).unwrap();
        assert!(cauchy_point(&z).is_err());
    }

    #[test]
    fn cg_rejects_zero_gradient() {
        let z = ModelSnapshot::new(DVector::zeros(2), 0.0, DVector::zeros(2), DMatrix::zeros(2, 2), 1.0).unwrap();
        assert!(solve_cg(&z, 1e-10, 2).is_err());
        assert!(solve_exact(&z).is_err());
    }

    #[test]
    fn contract_on_exact_step() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.0, 1.0]);
        let s = snap(&[0.7, -1.2], jac, 0.3);
        let step = solve_exact(&s).unwrap();
        let c = check_contract(&s, &step, &StepContract::DECLARED);
        assert!(c.ok(), "{c:?}");
        assert!(c.step_size_ratio <= 0.5 + 1e-12);
    }
}
