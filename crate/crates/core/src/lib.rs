//! Levenberg-Marquardt for noisy least squares, with random models and
//! probabilistically accurate function estimates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_assim;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod lm;
pub mod oracles;
pub mod problem;
pub mod rng;
pub mod subproblem;
pub mod synthetic;

pub use nalgebra;

pub use error::{Error, Result};
pub use lm::{run, IterationRecord, ModelSnapshot, RunTrace, SolverConfig, SolverState, StopReason};
pub use oracles::{
    AccuracyConstants, BernoulliOracle, EstimateOracle, ExactOracle, GaussianOracle, ModelDraw,
    ModelOracle, Oracle, OracleOutput, SplitOracle, SubsampleOracle,
};
pub use problem::{BlockResidualProblem, LinearLeastSquares, ResidualProblem};
pub use subproblem::{ExactSolver, StepContract, SubproblemSolver, TruncatedCg};
pub use data_assim::{DaOracle, DaProblem, DaResidual, Ensemble, Lorenz63Params, TwinConfig};
pub use diagnostics::{ComplexityEstimate, TheoryConstants, TheoryPrimitives};
pub use synthetic::SyntheticConfig;
