//! Model and estimate oracles, from exact evaluation to probabilistically
//! accurate random draws.
//!
//! A *model oracle* returns the gradient `g`, Jacobian `J` and center value
//! `m(x)` of the Gauss-Newton model at an iterate; an *estimate oracle*
//! returns noisy values `f⁰ ≈ f(x)` and `f¹ ≈ f(x+s)`. Accuracy is judged
//! on the scale of the current `μ`:
//!
//! * model accurate: `‖g − ∇f(x)‖ ≤ κ_eg/μ` and `|f(x) − m(x)| ≤ κ_ef/μ²`,
//! * estimates accurate: both `|f⁰ − f(x)|` and `|f¹ − f(x+s)|` are `≤ ε_f/μ²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure_finite_vec, Error, Result};
use crate::linalg;
use crate::problem::{BlockResidualProblem, ResidualProblem};
use crate::rng::{derive_seed, stream, StreamRng};

/// Accuracy constants and the probabilities with which they are met.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyConstants {
    pub kappa_ef: f64,
    pub kappa_eg: f64,
    pub eps_f: f64,
    /// Probability of an accurate model.
    pub p: f64,
    /// Probability of accurate estimates.
    pub q: f64,
}

impl AccuracyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_ef > 0.0 && self.kappa_eg > 0.0 && self.eps_f > 0.0) {
            return Err(Error::InvalidConfig("accuracy constants must be positive".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0 && self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidConfig("p and q must lie in (0,1]".into()));
        }
        Ok(())
    }

    /// The complexity analysis needs `pq > 1/2`.
    pub fn require_pq_above_half(&self) -> Result<()> {
        if self.p * self.q > 0.5 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "pq = {} violates pq > 1/2, required by the expected-complexity bound",
                self.p * self.q
            )))
        }
    }
}

/// Gradient, Jacobian and center value of one random model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDraw {
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub m_at_center: f64,
}

pub trait ModelOracle {
    /// Restarts the oracle's random stream.
    fn reseed(&mut self, _seed: u64) {}

    fn draw_model(&mut self, x: &DVector<f64>, mu: f64) -> Result<ModelDraw>;
}

/// Calls come in pairs: `estimate_center` at `x_j`, then (unless the
/// iteration is skipped) `estimate_trial` at `x_j + s_j`.
pub trait EstimateOracle {
    fn reseed(&mut self, _seed: u64) {}

    fn estimate_center(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64>;

    fn estimate_trial(&mut self, x_trial: &DVector<f64>, mu: f64) -> Result<f64>;
}

/// Both halves together. Blanket-implemented; the two halves receive
/// independent streams derived from the run seed.
pub trait Oracle: ModelOracle + EstimateOracle {
    fn reseed_all(&mut self, seed: u64) {
        ModelOracle::reseed(self, derive_seed(seed, 0));
        EstimateOracle::reseed(self, derive_seed(seed, 1));
    }
}

impl<T: ModelOracle + EstimateOracle + ?Sized> Oracle for T {}

/// Pairs a model oracle with an unrelated estimate oracle.
#[derive(Debug, Clone)]
pub struct SplitOracle<M, E> {
    pub model: M,
    pub estimates: E,
}

impl<M, E> SplitOracle<M, E> {
    pub fn new(model: M, estimates: E) -> Self {
        Self { model, estimates }
    }
}

impl<M: ModelOracle, E> ModelOracle for SplitOracle<M, E> {
    fn reseed(&mut self, seed: u64) {
        self.model.reseed(seed);
    }
    fn draw_model(&mut self, x: &DVector<f64>, mu: f64) -> Result<ModelDraw> {
        self.model.draw_model(x, mu)
    }
}

impl<M, E: EstimateOracle> EstimateOracle for SplitOracle<M, E> {
    fn reseed(&mut self, seed: u64) {
        self.estimates.reseed(seed);
    }
    fn estimate_center(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        self.estimates.estimate_center(x, mu)
    }
    fn estimate_trial(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        self.estimates.estimate_trial(x, mu)
    }
}

fn exact_model<P: ResidualProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<ModelDraw> {
    let r = problem.residual(x)?;
    ensure_finite_vec(&r, "residual")?;
    let jac = problem.jacobian(x)?;
    let g = jac.tr_mul(&r);
    Ok(ModelDraw {
        g,
        jac,
        m_at_center: 0.5 * r.norm_squared(),
    })
}

fn exact_value<P: ResidualProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<f64> {
    let f = problem.objective(x)?;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite("objective"))
    }
}

/// Deterministic oracle: `f⁰ = f`, `g = Jᵀr`, `J = J(x)`, `m(x) = f(x)`.
#[derive(Debug, Clone, Copy)]
pub struct ExactOracle<'a, P: ?Sized> {
    problem: &'a P,
}

impl<'a, P: ResidualProblem + ?Sized> ExactOracle<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self { problem }
    }
}

impl<P: ResidualProblem + ?Sized> ModelOracle for ExactOracle<'_, P> {
    fn draw_model(&mut self, x: &DVector<f64>, _mu: f64) -> Result<ModelDraw> {
        exact_model(self.problem, x)
    }
}

impl<P: ResidualProblem + ?Sized> EstimateOracle for ExactOracle<'_, P> {
    fn estimate_center(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        exact_value(self.problem, x)
    }
    fn estimate_trial(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        exact_value(self.problem, x)
    }
}

/// Scale `σ` such that `P(σ|Z| ≤ bound) = prob` for standard normal `Z`.
pub fn half_normal_scale(bound: f64, prob: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + prob));
    bound / z
}

fn unit_direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-300 {
            return v / norm;
        }
    }
}

/// Gaussian noise calibrated so that each accuracy event has the designed
/// probability.
///
/// The model's two conditions (gradient, center value) are each met with
/// probability `√p` and drawn independently, so both hold with probability
/// `p`; the two estimates are handled the same way with `√q`. The gradient
/// error is a uniformly distributed direction times `σ|Z|`, which makes
/// `‖g − ∇f‖ ≤ κ_eg/μ` an exact `√p` event in any dimension.
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a, P: ?Sized> {
    problem: &'a P,
    constants: AccuracyConstants,
    /// Entrywise Jacobian noise standard deviation at `μ = 1`; scales as `1/μ`.
    pub jac_noise: f64,
    /// Spectral-norm cap on the model Jacobian.
    pub kappa_jm: Option<f64>,
    model_rng: StreamRng,
    estimate_rng: StreamRng,
}

impl<'a, P: ResidualProblem + ?Sized> GaussianOracle<'a, P> {
    pub fn new(problem: &'a P, constants: AccuracyConstants) -> Result<Self> {
        constants.validate()?;
        if !(constants.p < 1.0 && constants.q < 1.0) {
            return Err(Error::InvalidConfig(
                "gaussian oracle needs p < 1 and q < 1 (finite quantile)".into(),
            ));
        }
        Ok(Self {
            problem,
            constants,
            jac_noise: 0.0,
            kappa_jm: None,
            model_rng: stream(0),
            estimate_rng: stream(1),
        })
    }

    pub fn with_jacobian_noise(mut self, jac_noise: f64, kappa_jm: Option<f64>) -> Self {
        self.jac_noise = jac_noise;
        self.kappa_jm = kappa_jm;
        self
    }

    pub fn constants(&self) -> &AccuracyConstants {
        &self.constants
    }

    /// Standard deviation of `f⁰` and `f¹` at this `μ`.
    pub fn estimate_sigma(&self, mu: f64) -> f64 {
        half_normal_scale(self.constants.eps_f / (mu * mu), self.constants.q.sqrt())
    }

    fn noisy_value(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        let f = exact_value(self.problem, x)?;
        let z: f64 = self.estimate_rng.sample(StandardNormal);
        Ok(f + self.estimate_sigma(mu) * z)
    }
}

impl<P: ResidualProblem + ?Sized> ModelOracle for GaussianOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.model_rng = stream(seed);
    }

    fn draw_model(&mut self, x: &DVector<f64>, mu: f64) -> Result<ModelDraw> {
        let exact = exact_model(self.problem, x)?;
        let p_half = self.constants.p.sqrt();
        let rng = &mut self.model_rng;

        let sigma_g = half_normal_scale(self.constants.kappa_eg / mu, p_half);
        let z: f64 = rng.sample(StandardNormal);
        let g = exact.g + unit_direction(x.len(), rng) * (sigma_g * z.abs());

        let sigma_m = half_normal_scale(self.constants.kappa_ef / (mu * mu), p_half);
        let zm: f64 = rng.sample(StandardNormal);
        let m_at_center = exact.m_at_center + sigma_m * zm;

        let mut jac = exact.jac;
        if self.jac_noise > 0.0 {
            let sd = self.jac_noise / mu;
            jac.iter_mut()
                .for_each(|v| *v += sd * rng.sample::<f64, _>(StandardNormal));
        }
        if let Some(cap) = self.kappa_jm {
            let norm = linalg::spectral_norm_exact(&jac);
            if norm > cap {
                jac *= cap / norm;
            }
        }
        Ok(ModelDraw { g, jac, m_at_center })
    }
}

impl<P: ResidualProblem + ?Sized> EstimateOracle for GaussianOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.estimate_rng = stream(seed);
    }
    fn estimate_center(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        self.noisy_value(x, mu)
    }
    fn estimate_trial(&mut self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        self.noisy_value(x, mu)
    }
}

/// Exact with probability `p` (model) and `q` (estimates), arbitrarily bad
/// otherwise.
///
/// A bad model replaces `g` with a random vector of norm `corruption`; bad
/// estimates are shifted by `±corruption`. The estimate coin is tossed once
/// per iteration, in `estimate_center`, and applies to both values.
#[derive(Debug, Clone)]
pub struct BernoulliOracle<'a, P: ?Sized> {
    problem: &'a P,
    pub p: f64,
    pub q: f64,
    pub corruption: f64,
    model_rng: StreamRng,
    estimate_rng: StreamRng,
    estimates_good: bool,
}

impl<'a, P: ResidualProblem + ?Sized> BernoulliOracle<'a, P> {
    pub fn new(problem: &'a P, p: f64, q: f64, corruption: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0 && q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidConfig("p and q must lie in (0,1]".into()));
        }
        if !(corruption >= 0.0 && corruption.is_finite()) {
            return Err(Error::InvalidConfig("corruption must be non-negative".into()));
        }
        Ok(Self {
            problem,
            p,
            q,
            corruption,
            model_rng: stream(0),
            estimate_rng: stream(1),
            estimates_good: true,
        })
    }

    fn shifted(&mut self, f: f64) -> f64 {
        if self.estimates_good {
            f
        } else if self.estimate_rng.random::<bool>() {
            f + self.corruption
        } else {
            f - self.corruption
        }
    }
}

impl<P: ResidualProblem + ?Sized> ModelOracle for BernoulliOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.model_rng = stream(seed);
    }

    fn draw_model(&mut self, x: &DVector<f64>, _mu: f64) -> Result<ModelDraw> {
        let mut draw = exact_model(self.problem, x)?;
        let good = self.model_rng.random::<f64>() < self.p;
        if !good {
            draw.g = unit_direction(x.len(), &mut self.model_rng) * self.corruption;
        }
        Ok(draw)
    }
}

impl<P: ResidualProblem + ?Sized> EstimateOracle for BernoulliOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.estimate_rng = stream(seed);
    }

    fn estimate_center(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        self.estimates_good = self.estimate_rng.random::<f64>() < self.q;
        let f = exact_value(self.problem, x)?;
        Ok(self.shifted(f))
    }

    fn estimate_trial(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        let f = exact_value(self.problem, x)?;
        Ok(self.shifted(f))
    }
}

/// Mini-batch estimates for block-structured residuals.
///
/// Each call samples `round(batch_fraction · B)` distinct blocks uniformly
/// and rescales by `B/|S|`, so value, gradient and `JᵀJ` are unbiased.
#[derive(Debug, Clone)]
pub struct SubsampleOracle<'a, P: ?Sized> {
    problem: &'a P,
    pub batch_fraction: f64,
    model_rng: StreamRng,
    estimate_rng: StreamRng,
}

/// Rescaled value, gradient and stacked Jacobian over `blocks`.
pub fn subsample_estimate<P: BlockResidualProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    blocks: &[usize],
) -> Result<ModelDraw> {
    if blocks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = problem.num_blocks() as f64 / blocks.len() as f64;
    let n = problem.dim();
    let mut value = 0.0;
    let mut g = DVector::zeros(n);
    let mut pieces = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let r = problem.block_residual(b, x)?;
        let j = problem.block_jacobian(b, x)?;
        value += 0.5 * r.norm_squared();
        g += j.tr_mul(&r);
        pieces.push(j);
    }
    let rows: usize = pieces.iter().map(|j| j.nrows()).sum();
    let root = scale.sqrt();
    let mut stacked = DMatrix::zeros(rows, n);
    let mut offset = 0;
    for j in pieces {
        let h = j.nrows();
        stacked.rows_mut(offset, h).copy_from(&(j * root));
        offset += h;
    }
    Ok(ModelDraw {
        g: g * scale,
        jac: stacked,
        m_at_center: value * scale,
    })
}

impl<'a, P: BlockResidualProblem + ?Sized> SubsampleOracle<'a, P> {
    pub fn new(problem: &'a P, batch_fraction: f64) -> Result<Self> {
        if !(batch_fraction > 0.0 && batch_fraction <= 1.0) {
            return Err(Error::InvalidConfig("batch_fraction must lie in (0,1]".into()));
        }
        let this = Self {
            problem,
            batch_fraction,
            model_rng: stream(0),
            estimate_rng: stream(1),
        };
        this.batch_size()?;
        Ok(this)
    }

    pub fn batch_size(&self) -> Result<usize> {
        let k = (self.batch_fraction * self.problem.num_blocks() as f64).round() as usize;
        if k == 0 {
            Err(Error::EmptyBatch)
        } else {
            Ok(k.min(self.problem.num_blocks()))
        }
    }

    fn sample_blocks(rng: &mut StreamRng, total: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, total, k).into_vec();
        idx.sort_unstable();
        idx
    }

    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        let k = self.batch_size()?;
        let blocks = Self::sample_blocks(&mut self.estimate_rng, self.problem.num_blocks(), k);
        Ok(subsample_estimate(self.problem, x, &blocks)?.m_at_center)
    }
}

impl<P: BlockResidualProblem + ?Sized> ModelOracle for SubsampleOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.model_rng = stream(seed);
    }
    fn draw_model(&mut self, x: &DVector<f64>, _mu: f64) -> Result<ModelDraw> {
        let k = self.batch_size()?;
        let blocks = Self::sample_blocks(&mut self.model_rng, self.problem.num_blocks(), k);
        subsample_estimate(self.problem, x, &blocks)
    }
}

impl<P: BlockResidualProblem + ?Sized> EstimateOracle for SubsampleOracle<'_, P> {
    fn reseed(&mut self, seed: u64) {
        self.estimate_rng = stream(seed);
    }
    fn estimate_center(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        self.value(x)
    }
    fn estimate_trial(&mut self, x: &DVector<f64>, _mu: f64) -> Result<f64> {
        self.value(x)
    }
}

/// One full oracle draw at `(x, μ)` with trial point `x + step`, labelled
/// against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub f0: f64,
    pub f1: f64,
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub m_at_center: f64,
    pub was_accurate_model: bool,
    pub was_accurate_estimates: bool,
    /// `‖g − ∇f(x)‖`.
    pub grad_error: f64,
    /// `|f(x) − m(x)|`.
    pub value_error: f64,
    /// `|f⁰ − f(x)|`, `|f¹ − f(x+s)|`.
    pub estimate_errors: (f64, f64),
}

pub fn sample_output<O: Oracle + ?Sized>(
    truth: &dyn ResidualProblem,
    oracle: &mut O,
    x: &DVector<f64>,
    step: &DVector<f64>,
    mu: f64,
    constants: &AccuracyConstants,
) -> Result<OracleOutput> {
    let f0 = oracle.estimate_center(x, mu)?;
    let draw = oracle.draw_model(x, mu)?;
    let trial = x + step;
    let f1 = oracle.estimate_trial(&trial, mu)?;

    let f = truth.objective(x)?;
    let ft = truth.objective(&trial)?;
    let grad = truth.gradient(x)?;
    let grad_error = (&draw.g - grad).norm();
    let value_error = (f - draw.m_at_center).abs();
    let estimate_errors = ((f0 - f).abs(), (f1 - ft).abs());
    let mu2 = mu * mu;
    Ok(OracleOutput {
        f0,
        f1,
        g: draw.g,
        jac: draw.jac,
        m_at_center: draw.m_at_center,
        was_accurate_model: grad_error <= constants.kappa_eg / mu && value_error <= constants.kappa_ef / mu2,
        was_accurate_estimates: estimate_errors.0 <= constants.eps_f / mu2
            && estimate_errors.1 <= constants.eps_f / mu2,
        grad_error,
        value_error,
        estimate_errors,
    })
}
