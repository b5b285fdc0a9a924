use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use stochlm::data_assim::twin_experiment_partial;
use stochlm::diagnostics::{check_probability_conditions, estimate_t_epsilon, on_mu_lattice, track_events};
use stochlm::nalgebra::DVector;
use stochlm::oracles::{BernoulliOracle, ExactOracle, GaussianOracle, Oracle, SubsampleOracle};
use stochlm::problem::{BlockedLinear, LinearLeastSquares};
use stochlm::subproblem::{ExactSolver, SubproblemSolver};
use stochlm::{lm, RunTrace, SolverConfig, SyntheticConfig};

use crate::config::{ExperimentFile, OracleSpec, SubsolverSpec};
use crate::{CliError, RunOptions};

/// What a command produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    /// Cells that did not complete; a non-empty list means exit code 2.
    pub failures: Vec<String>,
    pub files: Vec<String>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(header).map_err(runtime)?;
    }
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

#[derive(Debug, Serialize)]
struct TraceRow {
    iter: usize,
    f0: Option<f64>,
    f1: Option<f64>,
    rho: Option<f64>,
    mu: f64,
    step_norm: Option<f64>,
    success: Option<bool>,
    true_f: Option<f64>,
    grad_norm: Option<f64>,
}

const TRACE_HEADER: [&str; 9] = ["iter", "f0", "f1", "rho", "mu", "step_norm", "success", "true_f", "grad_norm"];

/// One row per iteration, then a closing row holding the final iterate's
/// `μ`, objective and gradient norm.
fn trace_rows(t: &RunTrace) -> Vec<TraceRow> {
    let mut rows: Vec<TraceRow> = t
        .records
        .iter()
        .map(|r| TraceRow {
            iter: r.iter,
            f0: Some(r.f0),
            f1: r.f1,
            rho: r.rho,
            mu: r.mu_before,
            step_norm: Some(r.step_norm),
            success: Some(r.success),
            true_f: r.true_f,
            grad_norm: r.true_grad_norm,
        })
        .collect();
    rows.push(TraceRow {
        iter: t.iterations(),
        f0: None,
        f1: None,
        rho: None,
        mu: t.mu_final,
        step_norm: None,
        success: None,
        true_f: t.final_true_f,
        grad_norm: t.final_grad_norm,
    });
    rows
}

fn solve_with(
    problem: &LinearLeastSquares,
    oracle: &mut dyn Oracle,
    subsolver: &dyn SubproblemSolver,
    cfg: &SolverConfig,
    x0: DVector<f64>,
    seed: u64,
) -> stochlm::Result<RunTrace> {
    lm::run(Some(problem), oracle, subsolver, cfg, x0, seed)
}

/// Runs the solver once and writes `trace.csv`.
pub fn cmd_solve(file: &ExperimentFile, opts: &RunOptions) -> Result<Outcome, CliError> {
    let c = &file.solve;
    c.solver.validate().map_err(config)?;
    let problem = c.problem.build().map_err(config)?;
    let n = problem.a.ncols();
    let x0 = match &c.x0 {
        Some(v) if v.len() != n => return Err(config(format!("x0 has length {}, problem has {n} variables", v.len()))),
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(n),
    };
    let subsolver: Box<dyn SubproblemSolver> = match c.subsolver {
        SubsolverSpec::Cg => Box::new(c.solver.truncated_cg()),
        SubsolverSpec::Exact => Box::new(ExactSolver),
    };
    prepare_dir(&opts.out)?;
    let seed = opts.master_seed;
    let trace = match &c.oracle {
        OracleSpec::Exact => {
            let mut o = ExactOracle::new(&problem);
            solve_with(&problem, &mut o, subsolver.as_ref(), &c.solver, x0, seed)
        }
        OracleSpec::Gaussian {
            constants,
            jac_noise,
            jac_cap,
        } => {
            let mut o = GaussianOracle::new(&problem, *constants)
                .map_err(config)?
                .with_jacobian_noise(*jac_noise, *jac_cap);
            let cfg = SolverConfig {
                event_thresholds: Some(*constants),
                ..c.solver.clone()
            };
            solve_with(&problem, &mut o, subsolver.as_ref(), &cfg, x0, seed)
        }
        OracleSpec::Bernoulli { p, q, corruption } => {
            let mut o = BernoulliOracle::new(&problem, *p, *q, *corruption).map_err(config)?;
            solve_with(&problem, &mut o, subsolver.as_ref(), &c.solver, x0, seed)
        }
        OracleSpec::Subsample {
            batch_fraction,
            block_size,
        } => {
            let blocked = BlockedLinear::new(problem.clone(), *block_size).map_err(config)?;
            let mut o = SubsampleOracle::new(&blocked, *batch_fraction).map_err(config)?;
            solve_with(&problem, &mut o, subsolver.as_ref(), &c.solver, x0, seed)
        }
    }
    .map_err(runtime)?;

    let path = opts.out.join("trace.csv");
    write_csv(&path, &trace_rows(&trace), &TRACE_HEADER)?;
    info!(
        "solve: {} iterations, stop {}, final gradient norm {:e}",
        trace.iterations(),
        trace.stop.as_str(),
        trace.final_grad_norm.unwrap_or(f64::NAN)
    );
    Ok(Outcome {
        failures: Vec::new(),
        files: vec![path.display().to_string()],
    })
}

#[derive(Debug, Serialize)]
struct CellRow {
    iteration: usize,
    f0: f64,
    true_f: Option<f64>,
    mu: f64,
    success: bool,
}

#[derive(Debug, Serialize)]
struct TwinSummaryRow {
    seed: u64,
    ensemble_size: String,
    iterations: usize,
    successes: usize,
    stop: &'static str,
    final_f: Option<f64>,
    final_grad_norm: Option<f64>,
    x0: f64,
    x1: f64,
    x2: f64,
    distance_to_inf: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TwinFailureRow {
    seed: u64,
    ensemble_size: String,
    error: String,
}

fn size_label(n: Option<usize>) -> String {
    n.map_or_else(|| "inf".to_string(), |n| n.to_string())
}

/// Runs the twin-experiment grid; writes `cells/seed<s>_N<n>.csv`,
/// `summary.csv` and `failures.csv`.
pub fn cmd_da_twin(file: &ExperimentFile, opts: &RunOptions) -> Result<Outcome, CliError> {
    let cfg = &file.da_twin;
    cfg.validate().map_err(config)?;
    let cells_dir = opts.out.join("cells");
    prepare_dir(&cells_dir)?;
    let (cells, failures) = twin_experiment_partial(cfg, opts.master_seed).map_err(runtime)?;

    let mut files: Vec<String> = cells
        .par_iter()
        .map(|c| {
            let rows: Vec<CellRow> = c
                .trace
                .records
                .iter()
                .map(|r| CellRow {
                    iteration: r.iter,
                    f0: r.f0,
                    true_f: r.true_f,
                    mu: r.mu_before,
                    success: r.success,
                })
                .collect();
            let path = cells_dir.join(format!("seed{}_N{}.csv", c.seed, size_label(c.ensemble_size)));
            write_csv(&path, &rows, &["iteration", "f0", "true_f", "mu", "success"])?;
            Ok(path.display().to_string())
        })
        .collect::<Result<_, CliError>>()?;

    let summary: Vec<TwinSummaryRow> = cells
        .iter()
        .map(|c| TwinSummaryRow {
            seed: c.seed,
            ensemble_size: size_label(c.ensemble_size),
            iterations: c.trace.iterations(),
            successes: c.trace.successes(),
            stop: c.trace.stop.as_str(),
            final_f: c.trace.final_true_f,
            final_grad_norm: c.trace.final_grad_norm,
            x0: c.trace.x_final[0],
            x1: c.trace.x_final[1],
            x2: c.trace.x_final[2],
            distance_to_inf: c.distance_to_inf,
        })
        .collect();
    let summary_path = opts.out.join("summary.csv");
    write_csv(
        &summary_path,
        &summary,
        &[
            "seed", "ensemble_size", "iterations", "successes", "stop", "final_f", "final_grad_norm", "x0", "x1", "x2",
            "distance_to_inf",
        ],
    )?;
    let failure_rows: Vec<TwinFailureRow> = failures
        .iter()
        .map(|f| TwinFailureRow {
            seed: f.seed,
            ensemble_size: size_label(f.ensemble_size),
            error: f.error.to_string(),
        })
        .collect();
    let failures_path = opts.out.join("failures.csv");
    write_csv(&failures_path, &failure_rows, &["seed", "ensemble_size", "error"])?;
    files.push(summary_path.display().to_string());
    files.push(failures_path.display().to_string());

    let failures: Vec<String> = failure_rows
        .iter()
        .map(|f| format!("seed {} N={}: {}", f.seed, f.ensemble_size, f.error))
        .collect();
    for f in &failures {
        warn!("da-twin cell failed: {f}");
    }
    info!("da-twin: {} cells completed, {} failed", cells.len(), failures.len());
    Ok(Outcome { failures, files })
}

#[derive(Debug, Serialize)]
struct ReplicationRow {
    epsilon: f64,
    replication: usize,
    t_eps: usize,
    capped: bool,
}

#[derive(Debug, Serialize)]
struct ComplexitySummaryRow {
    epsilon: f64,
    replications: usize,
    mean_t: f64,
    std_err: f64,
    ci_low: f64,
    ci_high: f64,
    capped: usize,
    excluded: bool,
    zeta: f64,
    hitting_time_bound: f64,
    below_bound: bool,
    cond1_holds: bool,
    cond2_holds: bool,
    fitted_slope: Option<f64>,
}

/// Estimates `E[T_ε]` on the synthetic problem; writes `replications.csv`
/// and `summary.csv`.
pub fn cmd_complexity(file: &ExperimentFile, opts: &RunOptions) -> Result<Outcome, CliError> {
    let c = &file.complexity;
    let acc = c.problem.accuracy();
    acc.validate().map_err(config)?;
    acc.require_pq_above_half().map_err(config)?;
    if c.replications == 0 || c.epsilons.is_empty() || c.epsilons.iter().any(|e| *e <= 0.0 || e.is_nan()) {
        return Err(config("complexity needs replications ≥ 1 and positive epsilons"));
    }
    c.problem.solver.validate().map_err(config)?;
    let theories = c
        .epsilons
        .iter()
        .map(|&e| c.problem.theory(e))
        .collect::<stochlm::Result<Vec<_>>>()
        .map_err(config)?;
    prepare_dir(&opts.out)?;

    let est = estimate_t_epsilon(|eps, seed| c.problem.run(seed, Some(eps)), &c.epsilons, c.replications, opts.master_seed)
        .map_err(runtime)?;

    let rows: Vec<ReplicationRow> = est
        .rows
        .iter()
        .map(|r| ReplicationRow {
            epsilon: r.epsilon,
            replication: r.replication,
            t_eps: r.t_eps,
            capped: r.capped,
        })
        .collect();
    let rep_path = opts.out.join("replications.csv");
    write_csv(&rep_path, &rows, &["epsilon", "replication", "t_eps", "capped"])?;

    let mut summary = Vec::with_capacity(est.summaries.len());
    for (s, tc) in est.summaries.iter().zip(&theories) {
        let bound = tc.expected_hitting_bound(acc.p, acc.q, s.epsilon);
        let (cond1, cond2) = if acc.p < 1.0 && acc.q < 1.0 {
            let r = check_probability_conditions(tc, acc.p, acc.q).map_err(runtime)?;
            (r.cond1_holds, r.cond2_holds)
        } else {
            (true, true)
        };
        summary.push(ComplexitySummaryRow {
            epsilon: s.epsilon,
            replications: s.mean_t.samples,
            mean_t: s.mean_t.mean,
            std_err: s.mean_t.std_err,
            ci_low: s.mean_t.ci_low,
            ci_high: s.mean_t.ci_high,
            capped: s.capped,
            excluded: s.excluded,
            zeta: tc.zeta,
            hitting_time_bound: bound,
            below_bound: s.mean_t.mean < bound,
            cond1_holds: cond1,
            cond2_holds: cond2,
            fitted_slope: est.fitted_slope,
        });
    }
    let sum_path = opts.out.join("summary.csv");
    write_csv(&sum_path, &summary, &[])?;
    match est.fitted_slope {
        Some(slope) => info!("complexity: fitted log-log slope {slope:.4}"),
        None => warn!("complexity: too few usable epsilons for a slope"),
    }
    Ok(Outcome {
        failures: Vec::new(),
        files: vec![rep_path.display().to_string(), sum_path.display().to_string()],
    })
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    p: f64,
    q: f64,
    seed: u64,
    iterations: usize,
    successes: usize,
    stop: &'static str,
    hitting_time: Option<usize>,
    u_frequency: f64,
    v_frequency: f64,
    mu_rule_ok: bool,
    acceptance_ok: bool,
    lattice_ok: bool,
    guarantee_premises: usize,
    guarantee_violations: usize,
}

impl SweepRow {
    fn all_ok(&self) -> bool {
        self.mu_rule_ok && self.acceptance_ok && self.lattice_ok && self.guarantee_violations == 0
    }
}

#[derive(Debug, Serialize)]
struct SweepFailureRow {
    p: f64,
    q: f64,
    seed: u64,
    error: String,
}

fn mu_rule_holds(t: &RunTrace) -> bool {
    let cfg = &t.config;
    t.records.iter().all(|r| {
        let ratio = r.mu_after / r.mu_before;
        let close = |x: f64| (ratio - x).abs() <= 1e-12 * x;
        close(cfg.lambda) || close(1.0 / cfg.lambda) || r.mu_after == cfg.mu_min
    })
}

fn sweep_cell(base: &SyntheticConfig, p: f64, q: f64, seed: u64, grad_tol: f64) -> stochlm::Result<SweepRow> {
    let cfg = SyntheticConfig { p, q, ..base.clone() };
    let tc = cfg.theory(grad_tol)?;
    let t = cfg.run(seed, Some(grad_tol))?;
    let ev = track_events(&t, &tc)?;
    let s = &t.config;
    Ok(SweepRow {
        p,
        q,
        seed,
        iterations: t.iterations(),
        successes: t.successes(),
        stop: t.stop.as_str(),
        hitting_time: t.hitting_time,
        u_frequency: ev.u_frequency,
        v_frequency: ev.v_frequency,
        mu_rule_ok: mu_rule_holds(&t),
        acceptance_ok: t.records.iter().all(|r| r.success == r.acceptance(s)),
        lattice_ok: on_mu_lattice(&t.mu_sequence(), s.mu0, s.lambda, s.mu_min, 0.0),
        guarantee_premises: ev.guarantee_premises,
        guarantee_violations: ev.violations.len(),
    })
}

/// Checks the per-trace invariants over a `(p, q, seed)` grid; writes
/// `sweep.csv` and `failures.csv`.
pub fn cmd_sweep(file: &ExperimentFile, opts: &RunOptions) -> Result<Outcome, CliError> {
    let c = &file.sweep;
    if c.p_values.is_empty() || c.q_values.is_empty() || c.seeds.is_empty() || c.grad_tol.is_nan() || c.grad_tol <= 0.0 {
        return Err(config("sweep needs p_values, q_values, seeds and a positive grad_tol"));
    }
    for &p in &c.p_values {
        for &q in &c.q_values {
            SyntheticConfig { p, q, ..c.problem.clone() }.accuracy().validate().map_err(config)?;
        }
    }
    c.problem.theory(c.grad_tol).map_err(config)?;
    prepare_dir(&opts.out)?;

    let cells: Vec<(f64, f64, u64)> = c
        .p_values
        .iter()
        .flat_map(|&p| c.q_values.iter().flat_map(move |&q| c.seeds.iter().map(move |&s| (p, q, s))))
        .collect();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(p, q, seed)| ((p, q, seed), sweep_cell(&c.problem, p, q, seed, c.grad_tol)))
        .collect();

    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for ((p, q, seed), r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failed.push(SweepFailureRow {
                p,
                q,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let sweep_path = opts.out.join("sweep.csv");
    write_csv(&sweep_path, &rows, &[])?;
    let failures_path = opts.out.join("failures.csv");
    write_csv(&failures_path, &failed, &["p", "q", "seed", "error"])?;

    let broken = rows.iter().filter(|r| !r.all_ok()).count();
    if broken > 0 {
        warn!("sweep: {broken} cells violate an invariant; see sweep.csv");
    }
    let failures: Vec<String> = failed
        .iter()
        .map(|f| format!("p={} q={} seed={}: {}", f.p, f.q, f.seed, f.error))
        .collect();
    for f in &failures {
        warn!("sweep cell failed: {f}");
    }
    info!("sweep: {} cells completed, {} failed", rows.len(), failures.len());
    Ok(Outcome {
        failures,
        files: vec![sweep_path.display().to_string(), failures_path.display().to_string()],
    })
}
