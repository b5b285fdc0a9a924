use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stochlm_cli::{cmd_complexity, cmd_da_twin, cmd_solve, cmd_sweep, CliError, ExperimentFile, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "stochlm", version, about = "Levenberg-Marquardt with random models: experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Run the solver once on a linear least-squares problem.
    Solve,
    /// Twin experiment on Lorenz-63 with ensemble covariances.
    DaTwin,
    /// Estimate expected hitting times over a grid of tolerances.
    Complexity,
    /// Check trace invariants over a grid of accuracy probabilities.
    Sweep,
}

fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let file = ExperimentFile::load(cli.config.as_deref())?;
    let opts = RunOptions {
        out: cli.out.clone(),
        master_seed: cli.seed,
        quiet: cli.quiet,
    };
    let outcome = match cli.command {
        Command::Solve => cmd_solve(&file, &opts)?,
        Command::DaTwin => cmd_da_twin(&file, &opts)?,
        Command::Complexity => cmd_complexity(&file, &opts)?,
        Command::Sweep => cmd_sweep(&file, &opts)?,
    };
    if !outcome.failures.is_empty() {
        return Err(CliError::Runtime(format!("{} cells failed", outcome.failures.len())));
    }
    Ok(outcome.files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(files) => {
            if !cli.quiet {
                for f in files {
                    println!("{f}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stochlm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
