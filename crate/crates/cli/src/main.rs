use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enkbf_core::config::{load_config, ExperimentConfig, ExperimentKind};
use enkbf_core::runner::{output_dir, run_experiment};
use enkbf_core::Error;

const THREADS_ENV: &str = "ENKBF_THREADS";

#[derive(Parser)]
#[command(name = "enkbf", version, about = "Ensemble Kalman-Bucy filtering experiments for spectral SPDE signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the signal (and observations, if configured).
    Signal(RunArgs),
    /// Run the ensemble Kalman-Bucy filter against a simulated truth.
    Enkbf(RunArgs),
    /// Kalman-Bucy filter and Riccati covariance for a linear-Gaussian model.
    KalmanBucy(RunArgs),
    /// Couple particles with mean-field copies and record the coupling error.
    Coupling(RunArgs),
    /// Convergence-rate sweep over ensemble sizes.
    Sweep(RunArgs),
    /// Exponential moment of the ensemble spread and the martingale QV cap.
    Expmoment(RunArgs),
    /// Scalar feedback particle filter against a bootstrap particle filter.
    Fpf(RunArgs),
    /// Parse and validate a config, then print its canonical form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, then `out/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to ENKBF_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence(_) => 3,
        _ => 2,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(value) => value
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{value}`"))),
        Err(_) => Ok(None),
    }
}

fn load(path: &Path, kind: ExperimentKind, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut config = load_config(path)?;
    if config.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "subcommand `{}` was given a config of kind `{}`",
            kind.name(),
            config.kind.name()
        )));
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(kind: ExperimentKind, args: RunArgs) -> ExitCode {
    let config = match load(&args.config, kind, args.seed) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let threads = match thread_count(args.threads) {
        Ok(Some(0)) => return fail(Error::InvalidArgument("thread count must be positive".into())),
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => return fail(Error::InvalidArgument(e.to_string())),
    };
    let out = output_dir(&config, args.out.as_deref());
    match pool.install(|| run_experiment(&config, &out)) {
        Ok(manifest) => {
            println!("{} artifacts written to {}", manifest.artifacts.len(), out.display());
            println!("config hash    {}", manifest.config_hash);
            println!("artifacts hash {}", manifest.artifacts_hash);
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Signal(a) => (ExperimentKind::Signal, a),
        Command::Enkbf(a) => (ExperimentKind::Enkbf, a),
        Command::KalmanBucy(a) => (ExperimentKind::KalmanBucy, a),
        Command::Coupling(a) => (ExperimentKind::Coupling, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::Expmoment(a) => (ExperimentKind::ExpMoment, a),
        Command::Fpf(a) => (ExperimentKind::Fpf, a),
        Command::Validate { config } => {
            return match load_config(&config) {
                Ok(c) => {
                    print!("{}", c.to_canonical_toml());
                    eprintln!("config hash {}", c.config_hash());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            };
        }
    };
    run(kind, args)
}
