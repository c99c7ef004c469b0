use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stochgrad::experiments::{
    load_config, run_bm_check, run_oracle, run_training, run_variance_bench, write_csv,
    ExperimentConfig,
};
use stochgrad::Error;

#[derive(Parser)]
#[command(
    name = "stochgrad",
    version,
    about = "Gradient estimators for stochastic binary and semi-hard units"
)]
struct Cli {
    /// Overrides the seed in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path (stdout when neither this nor `output` is set).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bias/variance benchmark of the configured estimator against the oracle.
    Estimate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on the configured task and log the expected-loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare Boltzmann-machine gradient estimators with the exact gradient.
    BmCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact expected loss and gradient by enumeration.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::Overflow { .. } | Error::NonFiniteLoss { .. } => 3,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> stochgrad::Result<()> {
    let path = match &cli.command {
        Command::Estimate { config }
        | Command::Train { config }
        | Command::BmCheck { config }
        | Command::Oracle { config } => config.clone(),
    };
    let mut config: ExperimentConfig = load_config(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.or_else(|| config.output.clone());
    let out = out.as_deref();
    let started = std::time::Instant::now();
    match cli.command {
        Command::Estimate { .. } => {
            let outcome = run_variance_bench(&config)?;
            write_csv(&outcome, out)?;
        }
        Command::Train { .. } => {
            let curve = run_training(&config)?;
            write_csv(&curve, out)?;
            curve.into_result()?;
        }
        Command::BmCheck { .. } => write_csv(&run_bm_check(&config)?, out)?,
        Command::Oracle { .. } => write_csv(&run_oracle(&config)?, out)?,
    }
    eprintln!("finished in {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
