//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use approxfl::channel::{measure_ber, rayleigh_ber_oracle};
use approxfl::fl::{partition_dataset, run_training, Experiment, TrainingOutcome};
use approxfl::metrics::{format_real, write_text, CsvLog, RoundCsvWriter, RoundMetrics};
use approxfl::nn::save_checkpoint;
use approxfl::seed::{derive_seed, stream};
use approxfl::transport::Transport;

use crate::config::{sidecar_path, RunConfig};

pub const BER_HEADER: [&str; 5] = ["order", "snr_db", "ber", "ci_halfwidth", "oracle_ber"];

#[derive(Debug, Clone, PartialEq)]
pub struct BerRow {
    pub order: usize,
    pub snr_db: f64,
    pub ber: f64,
    pub ci_halfwidth: f64,
    pub oracle_ber: f64,
}

/// Measures the BER of every (order, SNR) pair and writes one row each.
pub fn cmd_ber(orders: &[usize], snrs: &[f64], n_bits: u64, seed: u64, output: &Path) -> Result<Vec<BerRow>> {
    if n_bits == 0 {
        bail!("--bits must be positive");
    }
    let mut log = CsvLog::create(output, &BER_HEADER)?;
    let mut rows = Vec::new();
    for &order in orders {
        for &snr_db in snrs {
            let est = measure_ber(order, snr_db, n_bits, seed)?;
            let row = BerRow {
                order,
                snr_db,
                ber: est.ber,
                ci_halfwidth: est.ci_halfwidth,
                oracle_ber: rayleigh_ber_oracle(order, snr_db)?,
            };
            log.write_row([
                order.to_string(),
                format_real(snr_db),
                format_real(row.ber),
                format_real(row.ci_halfwidth),
                format_real(row.oracle_ber),
            ])?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn output_or(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_sidecar(cfg: &RunConfig, output: &Path) -> Result<()> {
    write_text(&sidecar_path(output), &cfg.to_json()?)?;
    Ok(())
}

/// Runs one federated training job, calling `on_round` after each round.
pub fn train<F>(cfg: &RunConfig, on_round: F) -> Result<TrainingOutcome>
where
    F: FnMut(&RoundMetrics) -> approxfl::Result<()>,
{
    let (train, test) = cfg.load_data()?;
    let net = cfg.network()?;
    if net.input_len() != train.shape.len() {
        bail!(
            "network `{}` expects {} inputs but the dataset images have {}",
            cfg.net.spec,
            net.input_len(),
            train.shape.len()
        );
    }
    let partition = partition_dataset(
        &train.labels,
        cfg.partition.clients,
        cfg.partition.mode,
        derive_seed(cfg.seed, &[stream::PARTITION]),
    )?;
    let transport = Transport::new(cfg.transport, cfg.channel)?;
    let exp = Experiment {
        net: &net,
        train: &train,
        test: &test,
        partition: &partition,
        transport: &transport,
        config: cfg.training,
        seed: cfg.seed,
    };
    Ok(run_training(&exp, on_round)?)
}

/// `train`: writes the per-round CSV (flushed every round), the resolved
/// config next to it and optionally the final model.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainingOutcome> {
    let output = output_or(cfg, "rounds.csv");
    let mut writer = RoundCsvWriter::create(&output)?;
    write_sidecar(cfg, &output)?;
    let outcome = train(cfg, |m| writer.write(m))?;
    if let Some(path) = checkpoint {
        save_checkpoint(path, cfg.network()?.spec(), &outcome.params)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Snr,
    Users,
    Sparsity,
    Modulation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Users => "users",
            SweepAxis::Sparsity => "sparsity",
            SweepAxis::Modulation => "modulation",
        }
    }

    /// Returns `base` with the swept parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let whole = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                bail!("{} sweep needs positive whole numbers, got {value}", self.name())
            }
        };
        match self {
            SweepAxis::Snr => cfg.channel.snr_db = value,
            SweepAxis::Users => cfg.partition.clients = whole()?,
            SweepAxis::Sparsity => cfg.transport.sparsity = value,
            SweepAxis::Modulation => cfg.transport.order = whole()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const SWEEP_HEADER: [&str; 11] = [
    "axis",
    "value",
    "seed",
    "rounds",
    "mean_l2_error",
    "final_accuracy",
    "payload_bits",
    "coded_bits",
    "retx_count",
    "airtime_symbols",
    "diverged_at",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub rounds: usize,
    /// Mean over rounds of the aggregation ℓ2 error.
    pub mean_l2_error: f64,
    pub final_accuracy: f64,
    pub payload_bits: u64,
    pub coded_bits: u64,
    pub retx_count: u64,
    pub airtime_symbols: u64,
    pub diverged_at: Option<usize>,
}

impl SweepRow {
    fn from_outcome(value: f64, seed: u64, o: &TrainingOutcome) -> Self {
        let n = o.rounds.len();
        SweepRow {
            value,
            seed,
            rounds: n,
            mean_l2_error: o.rounds.iter().map(|m| m.l2_error).sum::<f64>() / n as f64,
            final_accuracy: o.rounds.last().map_or(f64::NAN, |m| m.test_accuracy),
            payload_bits: o.rounds.iter().map(|m| m.payload_bits).sum(),
            coded_bits: o.rounds.iter().map(|m| m.coded_bits).sum(),
            retx_count: o.rounds.iter().map(|m| m.retx_count).sum(),
            airtime_symbols: o.rounds.iter().map(|m| m.airtime_symbols).sum(),
            diverged_at: o.diverged_at,
        }
    }
}

/// `sweep`: one training run per (value, seed), summarised one row each.
/// With `error_only` the per-round test evaluation is skipped.
pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], seeds: usize, error_only: bool) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds == 0 {
        bail!("a sweep needs at least one value and one seed");
    }
    let output = output_or(base, "sweep.csv");
    let mut log = CsvLog::create(&output, &SWEEP_HEADER)?;
    write_sidecar(base, &output)?;
    let mut rows = Vec::new();
    for &value in values {
        for s in 0..seeds as u64 {
            let mut cfg = axis.apply(base, value)?;
            cfg.seed = base.seed.wrapping_add(s);
            if error_only {
                cfg.training.evaluate = false;
            }
            let outcome = train(&cfg, |_| Ok(()))
                .with_context(|| format!("{} = {value}, seed {}", axis.name(), cfg.seed))?;
            let row = SweepRow::from_outcome(value, cfg.seed, &outcome);
            log.write_row([
                axis.name().to_string(),
                format_real(value),
                row.seed.to_string(),
                row.rounds.to_string(),
                format_real(row.mean_l2_error),
                format_real(row.final_accuracy),
                row.payload_bits.to_string(),
                row.coded_bits.to_string(),
                row.retx_count.to_string(),
                row.airtime_symbols.to_string(),
                row.diverged_at.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
            rows.push(row);
        }
    }
    Ok(rows)
}
