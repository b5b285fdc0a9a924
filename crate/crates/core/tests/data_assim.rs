mod common;

use common::*;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use stochlm::data_assim::{
    chebyshev_accuracy_bounds, da_objective, enkf_gain, enkf_mean_update, enkf_member_updates, lorenz_rk4_step,
    sample_ensemble, solve_da_subproblem, wishart_inverse_mean_check, Centering, ChebyshevInput, DaOracle,
    DaProblem, DaResidual, EnsembleMode, Lorenz63Params, ObservationSetup, TwinConfig, YMode,
};
use stochlm::oracles::{EstimateOracle, ModelOracle};
use stochlm::problem::ResidualProblem;
use stochlm::rng::stream;
use stochlm::Error;

fn problem_with(steps: usize, obs: ObservationSetup, z_b: DVector<f64>, y: Option<DVector<f64>>) -> DaProblem {
    let params = Lorenz63Params {
        steps_per_window: steps,
        ..Lorenz63Params::default()
    };
    let m = obs.times(steps).len() * obs.coordinates.len();
    let y = y.unwrap_or_else(|| DVector::zeros(m));
    DaProblem::new(params, obs, z_b, DMatrix::identity(3, 3), y, DMatrix::identity(m, m) * 0.1).unwrap()
}

#[test]
fn nontrivial_fixed_point_is_invariant() {
    let p = Lorenz63Params::default();
    let r = 72f64.sqrt();
    let s = Vector3::new(r, r, 27.0);
    // β(ρ − 1) = 8/3 · 27 = 72.
    assert!(p.vector_field(&s).norm() < 1e-12);
    let next = lorenz_rk4_step(&s, &p).unwrap();
    assert!((next - s).norm() < 1e-10);
}

#[test]
fn rk4_is_fourth_order() {
    let base = Lorenz63Params::default();
    let x0 = Vector3::new(1.0, 2.0, 20.0);
    let integrate = |dt: f64, steps: usize| {
        let p = Lorenz63Params { dt, ..base };
        (0..steps).fold(x0, |s, _| lorenz_rk4_step(&s, &p).unwrap())
    };
    let horizon = 0.2;
    let reference = integrate(horizon / 20_000.0, 20_000);
    let e1 = (integrate(horizon / 20.0, 20) - reference).norm();
    let e2 = (integrate(horizon / 40.0, 40) - reference).norm();
    let order = (e1 / e2).log2();
    assert!((3.8..=4.2).contains(&order), "observed order {order}");
}

#[test]
fn forward_operator_examples() {
    let z = v(&[1.0, -2.0, 3.0]);
    let p = problem_with(0, ObservationSetup { every: 1, coordinates: vec![0] }, z.clone(), None);
    assert_eq!(p.forward_h(&z).unwrap(), v(&[1.0]));
    let p = problem_with(0, ObservationSetup::default(), z.clone(), None);
    assert_eq!(p.forward_h(&z).unwrap(), z);
    let j = p.jacobian_h(&z).unwrap();
    assert!((j - DMatrix::identity(3, 3)).norm() < 1e-9);

    let p = problem_with(10, ObservationSetup { every: 5, coordinates: vec![2, 0] }, z.clone(), None);
    let h = p.forward_h(&z).unwrap();
    assert_eq!(h.len(), 6);
    let params = Lorenz63Params::default();
    let mut s = Vector3::new(1.0, -2.0, 3.0);
    for _ in 0..5 {
        s = lorenz_rk4_step(&s, &params).unwrap();
    }
    assert_eq!((h[2], h[3]), (s[2], s[0]));
    assert_eq!(p.obs_dim(), 6);
}

#[test]
fn jacobian_matches_directional_differences() {
    let mut rng = stream(41);
    let cfg = TwinConfig::default();
    for seed in 0..10 {
        let p = cfg.problem(seed).unwrap();
        let z = &p.z_b + DVector::from_fn(3, |_, _| gauss(&mut rng));
        let d = DVector::from_fn(3, |_, _| gauss(&mut rng)).normalize();
        let h = 1e-5;
        let fd = (p.forward_h(&(&z + &d * h)).unwrap() - p.forward_h(&(&z - &d * h)).unwrap()) / (2.0 * h);
        let jd = p.jacobian_h(&z).unwrap() * &d;
        assert!((&fd - &jd).norm() <= 1e-5 * (1.0 + jd.norm()), "{}", (&fd - &jd).norm());
    }
}

#[test]
fn one_step_jacobian_follows_the_chain_rule() {
    // H(z) = [z; Ψ(z)] with Ψ one RK4 step. Ψ' = I + dt/6 (k1' + 2k2' + 2k3' + k4').
    let params = Lorenz63Params::default();
    let z = Vector3::new(1.5, -0.5, 10.0);
    let jf = |s: &Vector3<f64>| {
        nalgebra::Matrix3::new(
            -params.sigma,
            params.sigma,
            0.0,
            params.rho - s[2],
            -1.0,
            -s[0],
            s[1],
            s[0],
            -params.beta,
        )
    };
    let f = |s: &Vector3<f64>| params.vector_field(s);
    let dt = params.dt;
    let i = nalgebra::Matrix3::identity();
    let k1 = f(&z);
    let d1 = jf(&z);
    let s2 = z + k1 * (dt / 2.0);
    let k2 = f(&s2);
    let d2 = jf(&s2) * (i + d1 * (dt / 2.0));
    let s3 = z + k2 * (dt / 2.0);
    let k3 = f(&s3);
    let d3 = jf(&s3) * (i + d2 * (dt / 2.0));
    let s4 = z + k3 * dt;
    let d4 = jf(&s4) * (i + d3 * dt);
    let psi = i + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (dt / 6.0);

    let p = problem_with(1, ObservationSetup::default(), v(&[0.0, 0.0, 0.0]), None);
    let j = p.jacobian_h(&v(&[z[0], z[1], z[2]])).unwrap();
    assert!((j.rows(0, 3) - DMatrix::identity(3, 3)).norm() < 1e-8);
    let got = j.rows(3, 3).into_owned();
    let want = DMatrix::from_fn(3, 3, |r, c| psi[(r, c)]);
    assert!((got - want).norm() < 1e-7);
}

#[test]
fn noise_free_observations_leave_zero_residual() {
    let z = v(&[0.5, 1.0, -1.0]);
    let probe = problem_with(10, ObservationSetup::default(), z.clone(), None);
    let y = probe.forward_h(&z).unwrap();
    let p = problem_with(10, ObservationSetup::default(), z.clone(), Some(y));
    let res = DaResidual::truth(&p).unwrap();
    assert_eq!(res.residual(&z).unwrap().norm(), 0.0);
    assert_eq!(da_objective(&z, &p, &p.b_inf).unwrap(), 0.0);
    let s = solve_da_subproblem(&p, &z, &p.b_inf, 1.0).unwrap();
    assert!(s.norm() < 1e-14);
}

#[test]
fn objective_examples_and_identity() {
    let z = v(&[0.0, 0.0, 0.0]);
    let p = problem_with(0, ObservationSetup::default(), z.clone(), None);
    // ½‖x‖² + ½‖x‖²/0.1 at x = (1, 0, 0).
    assert!((da_objective(&v(&[1.0, 0.0, 0.0]), &p, &p.b_inf).unwrap() - 5.5).abs() < 1e-12);

    let cfg = TwinConfig::default();
    let mut rng = stream(42);
    for seed in 0..20 {
        let p = cfg.problem(seed).unwrap();
        let e = sample_ensemble(&p.z_b, &p.b_inf, 10, Centering::Recentred, &mut rng).unwrap();
        let x = &p.z_b + DVector::from_fn(3, |_, _| gauss(&mut rng));
        let res = DaResidual::new(&p, e.b_n.clone()).unwrap();
        let a = res.objective(&x).unwrap();
        let b = da_objective(&x, &p, &e.b_n).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} {b}");
    }
}

#[test]
fn ensembles_converge_and_recentre() {
    let mut rng = stream(43);
    let z_b = v(&[1.0, -1.0, 2.0]);
    let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]);
    let e = sample_ensemble(&z_b, &b, 100_000, Centering::KnownMean, &mut rng).unwrap();
    assert!((&e.b_n - &b).norm() / b.norm() < 0.02);
    let e = sample_ensemble(&z_b, &b, 7, Centering::Recentred, &mut rng).unwrap();
    assert!((e.mean() - &z_b).norm() < 1e-14);
    let sum: DVector<f64> = e.anomalies.column_sum();
    assert!(sum.norm() < 1e-14);
    assert!(matches!(
        sample_ensemble(&z_b, &b, 3, Centering::Recentred, &mut rng),
        Err(Error::EnsembleTooSmall { size: 3, min: 4 })
    ));
}

#[test]
fn wishart_inverse_mean_factors() {
    let b = DMatrix::identity(3, 3);
    let mut rng = stream(44);
    let r = wishart_inverse_mean_check(&b, 50, 20_000, Centering::KnownMean, &mut rng).unwrap();
    assert_eq!(r.expected_factor, 49.0 / 46.0);
    assert!(r.relative_error < 0.02, "{r:?}");
    let r = wishart_inverse_mean_check(&b, 50, 20_000, Centering::Recentred, &mut rng).unwrap();
    assert_eq!(r.expected_factor, 49.0 / 45.0);
    assert!(r.relative_error < 0.02, "{r:?}");
    assert!(wishart_inverse_mean_check(&b, 4, 10, Centering::KnownMean, &mut rng).is_err());
}

#[test]
fn oracle_gradient_matches_finite_differences() {
    let cfg = TwinConfig::default();
    let p = cfg.problem(3).unwrap();
    let mut o = DaOracle::new(&p, Some(20), EnsembleMode::Fixed).unwrap();
    ModelOracle::reseed(&mut o, 5);
    let cov = o.covariance().clone();
    let x = &p.z_b + v(&[0.3, -0.2, 0.1]);
    let f0 = o.estimate_center(&x, 1.0).unwrap();
    let d = o.draw_model(&x, 1.0).unwrap();
    assert_eq!(d.m_at_center, f0);
    for i in 0..3 {
        let h = 1e-6;
        let mut a = x.clone();
        a[i] += h;
        let mut b = x.clone();
        b[i] -= h;
        let fd = (da_objective(&a, &p, &cov).unwrap() - da_objective(&b, &p, &cov).unwrap()) / (2.0 * h);
        assert!((fd - d.g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", d.g[i]);
    }
}

#[test]
fn fixed_ensemble_is_stable_and_resampling_is_not() {
    let cfg = TwinConfig::default();
    let p = cfg.problem(1).unwrap();
    let x = p.z_b.clone() + v(&[0.2, 0.2, 0.2]);
    let mut fixed = DaOracle::new(&p, Some(10), EnsembleMode::Fixed).unwrap();
    let a = fixed.estimate_center(&x, 1.0).unwrap();
    let b = fixed.estimate_center(&x, 1.0).unwrap();
    assert_eq!(a, b);
    let mut moving = DaOracle::new(&p, Some(10), EnsembleMode::ResamplePerIteration).unwrap();
    let a = moving.estimate_center(&x, 1.0).unwrap();
    let b = moving.estimate_center(&x, 1.0).unwrap();
    assert_ne!(a, b);
    let mut exact = DaOracle::new(&p, None, EnsembleMode::ResamplePerIteration).unwrap();
    assert_eq!(exact.covariance(), &p.b_inf);
    let truth = DaResidual::truth(&p).unwrap().objective(&x).unwrap();
    assert_eq!(exact.estimate_center(&x, 1.0).unwrap(), truth);
}

#[test]
fn enkf_mean_update_solves_the_unregularized_subproblem() {
    let cfg = TwinConfig::default();
    let mut rng = stream(45);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let p = cfg.problem(seed).unwrap();
        let size = rng.random_range(5..30);
        let e = sample_ensemble(&p.z_b, &p.b_inf, size, Centering::Recentred, &mut rng).unwrap();
        let x = &p.z_b + DVector::from_fn(3, |_, _| 0.5 * gauss(&mut rng));
        let s_lm = solve_da_subproblem(&p, &x, &e.b_n, 0.0).unwrap();
        let s_kf = enkf_mean_update(&p, &x, &e.b_n).unwrap();
        worst = worst.max((&s_lm - &s_kf).norm());
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn member_updates_average_to_the_mean_update() {
    let cfg = TwinConfig::default();
    let p = cfg.problem(2).unwrap();
    let mut rng = stream(46);
    let e = sample_ensemble(&p.z_b, &p.b_inf, 12, Centering::Recentred, &mut rng).unwrap();
    let x = &p.z_b + v(&[0.1, 0.0, -0.1]);
    let members = enkf_member_updates(&p, &x, &e, &mut rng).unwrap();
    let avg = members.iter().fold(DVector::zeros(3), |a, s| a + s) / members.len() as f64;
    let mean = enkf_mean_update(&p, &x, &e.b_n).unwrap();
    assert!((avg - mean).norm() < 1e-10);
}

#[test]
fn gain_with_identity_observation() {
    let b = DMatrix::identity(2, 2) * 2.0;
    let h = DMatrix::identity(2, 2);
    let r = DMatrix::identity(2, 2) * 2.0;
    let k = enkf_gain(&b, &h, &r).unwrap();
    assert!((k - DMatrix::identity(2, 2) * 0.5).norm() < 1e-15);
}

#[test]
fn regularization_shrinks_the_step() {
    let cfg = TwinConfig::default();
    let p = cfg.problem(4).unwrap();
    let x = &p.z_b + v(&[1.0, -1.0, 0.5]);
    let mut last = f64::INFINITY;
    for k in -3..6 {
        let s = solve_da_subproblem(&p, &x, &p.b_inf, 10f64.powi(k)).unwrap();
        assert!(s.norm() < last);
        last = s.norm();
    }
    assert!(solve_da_subproblem(&p, &x, &p.b_inf, -1.0).is_err());
}

#[test]
fn chebyshev_bounds_near_the_background() {
    let cfg = TwinConfig::default();
    let p = cfg.problem(0).unwrap();
    let mut rng = stream(47);
    let input = ChebyshevInput {
        problem: &p,
        x: &p.z_b + v(&[0.01, 0.0, 0.0]),
        x_trial: &p.z_b + v(&[0.0, 0.01, 0.0]),
        iteration: 0,
        mu0: 1.0,
        lambda: 2.0,
        mu_max: 1e16,
        kappa_ef: 1.0,
        kappa_eg: 1.0,
        eps_f: 1.0,
        ensemble_size: 10_000,
        resamples: 100,
    };
    let rep = chebyshev_accuracy_bounds(&input, &mut rng).unwrap();
    assert!(rep.q_lower.unwrap() >= 0.99, "{rep:?}");
    assert!(rep.p_lower.unwrap() >= 0.99, "{rep:?}");
    assert_eq!(rep.mu_bar, 1.0);

    let far = ChebyshevInput {
        iteration: 40,
        ensemble_size: 10,
        ..input.clone()
    };
    let rep = chebyshev_accuracy_bounds(&far, &mut rng).unwrap();
    assert!(rep.q_lower.is_none() && rep.p_lower.is_none());
    assert!(rep.theta <= 0.0);
    let small = ChebyshevInput { ensemble_size: 4, ..input };
    assert!(chebyshev_accuracy_bounds(&small, &mut rng).is_err());
}

#[test]
fn scalar_chebyshev_sanity() {
    // P(|X − EX| ≥ t) ≤ Var/t² for a sample of a uniform variable.
    let mut rng = stream(48);
    let xs: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    for t in [0.3, 0.4, 0.45] {
        let freq = xs.iter().filter(|x| (*x - mean).abs() >= t).count() as f64 / xs.len() as f64;
        assert!(freq <= var / (t * t));
    }
}

#[test]
fn twin_config_validation_and_modes() {
    let bad = TwinConfig {
        ensemble_sizes: vec![Some(3)],
        ..TwinConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::EnsembleTooSmall { size: 3, .. })));
    let truth = TwinConfig {
        y_mode: YMode::TruthPlusNoise,
        ..TwinConfig::default()
    };
    let a = truth.problem(0).unwrap();
    let b = TwinConfig::default().problem(0).unwrap();
    assert_eq!(a.z_b, b.z_b);
    assert_ne!(a.y, b.y);
    assert_eq!(b.obs_dim(), 33);
}
