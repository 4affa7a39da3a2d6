use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use penreflect::cli::run;
use penreflect::config::{parse_config_with, Command};
use penreflect::Error;

const DEFAULT_OUT: &str = "penreflect-out";

/// Monte Carlo and finite-difference solvers for reflected and penalized
/// diffusions and semilinear Neumann problems.
#[derive(Debug, Parser)]
#[command(name = "penreflect", version)]
struct Args {
    /// simulate-forward | solve-bsde | evaluate-field | solve-fd |
    /// study-forward-convergence | study-field-convergence |
    /// study-moment-uniformity | study-initial-continuity
    command: String,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all available cores by default.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long, env = "PENREFLECT_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("penreflect: at least one verdict failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("penreflect: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(args: &Args) -> Result<bool, Error> {
    let command = Command::parse(&args.command).ok_or_else(|| {
        let names: Vec<_> = Command::ALL.iter().map(|c| c.name()).collect();
        Error::InvalidInput(format!("unknown command '{}'; expected one of {}", args.command, names.join(", ")))
    })?;
    let text = std::fs::read_to_string(&args.config)?;
    let mut config = parse_config_with(&text, Some(command))?;
    if let Some(seed) = args.seed {
        if seed > i64::MAX as u64 {
            return Err(Error::InvalidInput(format!("--seed must be at most {}", i64::MAX)));
        }
        config.ensemble.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(Error::InvalidInput("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    let outcome = pool.install(|| run(&config, &out))?;
    print!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.passed)
}
