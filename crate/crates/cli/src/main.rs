use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use approxfl_cli::commands::{cmd_ber, cmd_sweep, cmd_train, SweepAxis};
use approxfl_cli::config::{resolve, Preset, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Federated learning over lossy wireless uplinks.
#[derive(Parser)]
#[command(name = "approxfl", version)]
struct Cli {
    /// Worker threads for client training and BER trials. Results do not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override one config field, e.g. `--set channel.snr_db=10`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut sets = self.sets.clone();
        if let Some(seed) = self.seed {
            sets.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.output {
            sets.push(format!("output={}", serde_json::Value::String(out.display().to_string())));
        }
        resolve(self.preset, self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo bit error rate over the Rayleigh channel.
    Ber {
        #[arg(long, value_delimiter = ',', default_value = "4,16,256")]
        orders: Vec<usize>,
        #[arg(long = "snr", value_delimiter = ',', default_value = "0,10,20", allow_hyphen_values = true)]
        snrs: Vec<f64>,
        #[arg(long, default_value_t = 10_000_000)]
        bits: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "ber.csv")]
        output: PathBuf,
    },
    /// One federated training run; writes a per-round CSV.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Save the final model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat training across values of one parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Runs per value, with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Skip test evaluation; only the aggregation error is needed.
        #[arg(long)]
        error_only: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::Ber { orders, snrs, bits, seed, output } => {
            cmd_ber(&orders, &snrs, bits, seed, &output)?;
            Ok(())
        }
        Command::Train { run, checkpoint } => {
            let cfg = run.resolve()?;
            let outcome = cmd_train(&cfg, checkpoint.as_deref())?;
            if let Some(r) = outcome.diverged_at {
                eprintln!("model became non-finite in round {r}");
            }
            Ok(())
        }
        Command::Sweep { run, axis, values, seeds, error_only } => {
            let cfg = run.resolve()?;
            cmd_sweep(&cfg, axis, &values, seeds, error_only)?;
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
