use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use markov_admm::cli::{self, CliError};

#[derive(Parser)]
#[command(name = "markov-admm", version, about = "Synchronous and Markov-chain driven consensus ADMM")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics CSVs, constants.json and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print the convergence constants for the configured problem and chain.
    Constants {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parse and cross-check a config, printing the resolved form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Numerical(e.to_string()))
}

fn execute(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Run {
            config,
            out,
            seed,
            trials,
        } => {
            let mut cfg = cli::validate_config(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.check()?;
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| CliError::Invalid {
                    field: "out_dir".into(),
                    message: "pass --out or set out_dir".into(),
                })?;
            let bundle = cli::run_experiment(&cfg)?;
            cli::emit(&bundle, &out)?;
            for e in &bundle.engines {
                let last = e.metrics.x_err.mean.last().copied().unwrap_or(f64::NAN);
                let rate = e
                    .rate_fit
                    .map(|f| format!("rate {:.6} (r² {:.3})", f.rate, f.r_squared))
                    .unwrap_or_else(|| "rate n/a".into());
                println!(
                    "{:>5}: {} trial(s), final mean x_err {last:.3e}, {rate}",
                    e.engine.name(),
                    e.trials
                );
            }
            if let Some(c) = &bundle.constants {
                println!("{c}");
            }
            if let Some(s) = &bundle.stationary_comparison {
                println!("stationary distribution: {}", s.verdict);
            }
            println!("results written to {}", out.display());
        }
        Command::Constants { config } => {
            let cfg = cli::validate_config(&config)?;
            println!("{}", to_json(&cli::constants_report(&cfg)?)?);
        }
        Command::Validate { config } => {
            let cfg = cli::validate_config(&config)?;
            println!("{}", to_json(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
