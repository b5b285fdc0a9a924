//! JSON experiment files.
//!
//! One file may describe every command; each command reads its own section
//! and falls back to defaults for missing ones:
//!
//! ```json
//! { "schema_version": 1, "complexity": { "replications": 50 } }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stochlm::nalgebra::{DMatrix, DVector};
use stochlm::oracles::AccuracyConstants;
use stochlm::problem::LinearLeastSquares;
use stochlm::rng::stream;
use stochlm::{SolverConfig, SyntheticConfig, TwinConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub da_twin: TwinConfig,
    #[serde(default)]
    pub complexity: ComplexityConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            solve: SolveConfig::default(),
            da_twin: TwinConfig::default(),
            complexity: ComplexityConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentFile {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}:{msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", e.line(), e.column())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }
}

/// Residual function for `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `rows × cols` instance with singular values in `[1, 3]` and a
    /// Gaussian right-hand side, drawn from `problem_seed`.
    RandomLinear { rows: usize, cols: usize, problem_seed: u64 },
    /// Explicit `A` (row-major rows) and `b`.
    Linear { a: Vec<Vec<f64>>, b: Vec<f64> },
    /// `r(x) = diag(d)(x − target)`.
    Diagonal { diagonal: Vec<f64>, target: Vec<f64> },
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::RandomLinear {
            rows: 10,
            cols: 5,
            problem_seed: 0,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self) -> stochlm::Result<LinearLeastSquares> {
        match self {
            ProblemSpec::RandomLinear { rows, cols, problem_seed } => {
                if rows < cols || *cols == 0 {
                    return Err(stochlm::Error::InvalidConfig("random_linear needs rows ≥ cols ≥ 1".into()));
                }
                Ok(LinearLeastSquares::random_well_conditioned(*rows, *cols, &mut stream(*problem_seed)))
            }
            ProblemSpec::Linear { a, b } => {
                let cols = a.first().map_or(0, Vec::len);
                if cols == 0 || a.iter().any(|row| row.len() != cols) {
                    return Err(stochlm::Error::InvalidConfig("rows of `a` must be non-empty and equally long".into()));
                }
                let flat: Vec<f64> = a.iter().flatten().copied().collect();
                LinearLeastSquares::new(DMatrix::from_row_slice(a.len(), cols, &flat), DVector::from_column_slice(b))
            }
            ProblemSpec::Diagonal { diagonal, target } => LinearLeastSquares::diagonal(diagonal, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    #[default]
    Exact,
    Gaussian {
        constants: AccuracyConstants,
        #[serde(default)]
        jac_noise: f64,
        #[serde(default)]
        jac_cap: Option<f64>,
    },
    Bernoulli { p: f64, q: f64, corruption: f64 },
    /// Rows are grouped into blocks of `block_size` and sampled.
    Subsample { batch_fraction: f64, block_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubsolverSpec {
    #[default]
    Cg,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub problem: ProblemSpec,
    pub oracle: OracleSpec,
    pub subsolver: SubsolverSpec,
    /// Defaults to the zero vector.
    pub x0: Option<Vec<f64>>,
    pub solver: SolverConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            oracle: OracleSpec::default(),
            subsolver: SubsolverSpec::default(),
            x0: None,
            solver: SolverConfig {
                eta2: 1e-3,
                max_iters: 50,
                ..SolverConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityConfig {
    pub problem: SyntheticConfig,
    pub epsilons: Vec<f64>,
    pub replications: usize,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            problem: SyntheticConfig::default(),
            epsilons: vec![1e-1, 3e-2, 1e-2],
            replications: 200,
        }
    }
}

/// Invariant checks over a `(p, q, seed)` grid on the synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub problem: SyntheticConfig,
    pub p_values: Vec<f64>,
    pub q_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub grad_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            problem: SyntheticConfig::default(),
            p_values: vec![0.6, 0.8, 0.9, 0.98],
            q_values: vec![0.6, 0.8, 0.9, 0.98],
            seeds: (0..10).collect(),
            grad_tol: 1e-2,
        }
    }
}
