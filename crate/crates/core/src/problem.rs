//! Nonlinear least-squares problems `f(x) = ½‖r(x)‖²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// A residual map together with its Jacobian.
///
/// Implementations are the ground truth: the objective and gradient derived
/// from them are what the diagnostics compare noisy estimates against.
pub trait ResidualProblem: Sync {
    /// Dimension of `x`.
    fn dim(&self) -> usize;

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// `m × n` Jacobian of [`residual`](Self::residual).
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(x)?;
        Ok(0.5 * r.norm_squared())
    }

    /// `J(x)ᵀ r(x)`.
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(x)?;
        let j = self.jacobian(x)?;
        Ok(j.tr_mul(&r))
    }
}

impl<P: ResidualProblem + ?Sized> ResidualProblem for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).residual(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).objective(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).gradient(x)
    }
}

fn check_dim(x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x.len(),
        });
    }
    Ok(())
}

/// `r(x) = A x − b`.
#[derive(Debug, Clone)]
pub struct LinearLeastSquares {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearLeastSquares {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                found: b.len(),
            });
        }
        Ok(Self { a, b })
    }

    /// Random `rows × cols` instance whose singular values lie in `[1, 3]`.
    ///
    /// The matrix is `U diag(σ) Vᵀ` with orthonormal factors from QR of
    /// Gaussian matrices, so its conditioning is controlled exactly.
    pub fn random_well_conditioned<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        assert!(rows >= cols && cols > 0);
        let gauss = |r: usize, c: usize, rng: &mut R| {
            DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let u = gauss(rows, cols, rng).qr().q();
        let v = gauss(cols, cols, rng).qr().q();
        let sigma = DVector::from_fn(cols, |i, _| {
            if cols == 1 {
                2.0
            } else {
                1.0 + 2.0 * i as f64 / (cols - 1) as f64
            }
        });
        let a = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
        let b = DVector::from_fn(rows, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self { a, b }
    }

    /// `r(x) = diag(d)(x − target)`, a separable strongly convex quadratic.
    pub fn diagonal(d: &[f64], target: &[f64]) -> Result<Self> {
        if d.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: d.len(),
                found: target.len(),
            });
        }
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(d));
        let b = &a * DVector::from_column_slice(target);
        Ok(Self { a, b })
    }

    /// Lipschitz constant of `∇f`, i.e. `‖AᵀA‖ = ‖A‖²`.
    pub fn gradient_lipschitz(&self) -> f64 {
        let s = self.jacobian_norm();
        s * s
    }

    /// Spectral norm of the (constant) Jacobian.
    pub fn jacobian_norm(&self) -> f64 {
        linalg::spectral_norm_exact(&self.a)
    }
}

impl ResidualProblem for LinearLeastSquares {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x, self.dim())?;
        Ok(&self.a * x - &self.b)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(x, self.dim())?;
        Ok(self.a.clone())
    }
}

/// `r(x) = x`; the global minimizer is the origin.
#[derive(Debug, Clone, Copy)]
pub struct IdentityResidual {
    pub n: usize,
}

impl ResidualProblem for IdentityResidual {
    fn dim(&self) -> usize {
        self.n
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x, self.n)?;
        Ok(x.clone())
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(x, self.n)?;
        Ok(DMatrix::identity(self.n, self.n))
    }
}

/// A residual that splits into independent per-datum blocks,
/// `f(x) = ½ Σ_b ‖r_b(x)‖²`.
pub trait BlockResidualProblem: ResidualProblem {
    fn num_blocks(&self) -> usize;
    fn block_residual(&self, block: usize, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn block_jacobian(&self, block: usize, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Linear least squares whose rows are grouped into consecutive blocks.
#[derive(Debug, Clone)]
pub struct BlockedLinear {
    pub inner: LinearLeastSquares,
    block_size: usize,
}

impl BlockedLinear {
    pub fn new(inner: LinearLeastSquares, block_size: usize) -> Result<Self> {
        if block_size == 0 || !inner.a.nrows().is_multiple_of(block_size) {
            return Err(Error::InvalidConfig(format!(
                "block size {block_size} does not divide {} rows",
                inner.a.nrows()
            )));
        }
        Ok(Self { inner, block_size })
    }

    fn rows(&self, block: usize) -> std::ops::Range<usize> {
        block * self.block_size..(block + 1) * self.block_size
    }
}

impl ResidualProblem for BlockedLinear {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.residual(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.inner.jacobian(x)
    }
}

impl BlockResidualProblem for BlockedLinear {
    fn num_blocks(&self) -> usize {
        self.inner.a.nrows() / self.block_size
    }

    fn block_residual(&self, block: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x, self.dim())?;
        let rows = self.rows(block);
        let a = self.inner.a.rows(rows.start, rows.len());
        let b = self.inner.b.rows(rows.start, rows.len());
        Ok(a * x - b)
    }

    fn block_jacobian(&self, block: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(x, self.dim())?;
        let rows = self.rows(block);
        Ok(self.inner.a.rows(rows.start, rows.len()).into_owned())
    }
}
