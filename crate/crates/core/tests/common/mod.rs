#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use stochlm::lm::ModelSnapshot;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Random snapshot with `n ∈ 2..=8` and `γ` log-uniform in `[1e-6, 1e6]`.
pub fn random_snapshot<R: Rng>(rng: &mut R) -> ModelSnapshot {
    let n = rng.random_range(2..=8);
    let m = rng.random_range(1..=10);
    let jac = DMatrix::from_fn(m, n, |_, _| gauss(rng) * rng.random_range(0.1..3.0));
    let g = DVector::from_fn(n, |_, _| gauss(rng));
    let gamma = 10f64.powf(rng.random_range(-6.0..6.0));
    let mu = gamma / g.norm();
    ModelSnapshot::new(DVector::zeros(n), gauss(rng), g, jac, mu).unwrap()
}

/// Normal-equations solution of `min ½‖Ax − b‖²` by dense Cholesky.
pub fn normal_equations(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let ata = a.transpose() * a;
    ata.cholesky().unwrap().solve(&(a.transpose() * b))
}

/// `½ sᵀHs + gᵀs` evaluated densely.
pub fn dense_model(snap: &ModelSnapshot, s: &DVector<f64>) -> f64 {
    let h = snap.jac.transpose() * &snap.jac + DMatrix::identity(snap.dim(), snap.dim()) * snap.gamma;
    snap.m_at_center + snap.g.dot(s) + 0.5 * s.dot(&(h * s))
}
