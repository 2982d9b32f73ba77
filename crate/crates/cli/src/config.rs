//! Run configuration: defaults, presets, JSON files and `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use approxfl::channel::ChannelParams;
use approxfl::dataset::{load_cifar_batches, Dataset, IdxPaths};
use approxfl::fl::{PartitionMode, TrainingConfig};
use approxfl::nn::{Network, NetworkSpec};
use approxfl::transport::TransportScheme;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "APPROXFL_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist-subset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    #[default]
    Mnist,
    FashionMnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// IDX directory (MNIST layouts) or Cifar-10 binary batch directory.
    /// Falls back to `$APPROXFL_DATA_DIR`, then `data/mnist-subset`.
    pub dir: Option<PathBuf>,
    /// Keep only the first N training samples.
    pub subset_size: Option<usize>,
    /// Keep only the first N test samples.
    pub test_subset_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub clients: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { mode: PartitionMode::Iid, clients: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// dense-small, cnn-mnist, cnn-fashion or cnn-cifar.
    pub spec: String,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { spec: "dense-small".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub net: NetConfig,
    pub training: TrainingConfig,
    pub channel: ChannelParams,
    pub transport: TransportScheme,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 10 clients, 1,000 MNIST training samples, dense net, 30 rounds.
    Desk,
    /// 100 clients, full MNIST, the MNIST CNN, 100 rounds.
    PaperMnist,
}

impl Preset {
    fn overlay(self) -> Value {
        match self {
            Preset::Desk => json!({
                "dataset": {"name": "mnist", "subset_size": 1000},
                "partition": {"clients": 10},
                "net": {"spec": "dense-small"},
                "training": {"rounds": 30},
            }),
            Preset::PaperMnist => json!({
                "dataset": {"name": "mnist", "subset_size": null},
                "partition": {"clients": 100},
                "net": {"spec": "cnn-mnist"},
                "training": {"rounds": 100},
            }),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `dotted.path=value`; the value is read as JSON, or as a string
/// when it is not valid JSON.
pub fn apply_set(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    for key in path.split('.') {
        if key.is_empty() {
            bail!("override `{assignment}` has an empty key");
        }
        if !slot.is_object() {
            *slot = Value::Object(Map::new());
        }
        slot = slot.as_object_mut().expect("object").entry(key).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Builds the run configuration: defaults, then the preset, then the JSON
/// file, then each `--set` override in order.
pub fn resolve(preset: Option<Preset>, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = preset {
        merge(&mut value, p.overlay());
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !overlay.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        merge(&mut value, overlay);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    from_value(value)
}

/// Deserializes with the offending field path in the error message.
pub fn from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| anyhow!("invalid config at `{}`: {}", e.path(), e.inner()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate().context("channel")?;
        self.transport.validate().context("transport")?;
        NetworkSpec::by_name(&self.net.spec).context("net.spec")?;
        let t = &self.training;
        if t.rounds == 0 {
            bail!("training.rounds must be positive");
        }
        if !(t.lr > 0.0 && t.lr < 1.0) {
            bail!("training.lr must lie in (0, 1), got {}", t.lr);
        }
        if t.batch_size == 0 {
            bail!("training.batch_size must be positive");
        }
        if self.partition.clients == 0 {
            bail!("partition.clients must be positive");
        }
        if let Some(tol) = t.tolerance {
            if !(tol >= 0.0) {
                bail!("training.tolerance must be non-negative");
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        Ok(Network::new(NetworkSpec::by_name(&self.net.spec)?)?)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dataset
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    /// Loads the training and test sets, applying the subset sizes.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let dir = self.data_dir();
        let (train, test) = match self.dataset.name {
            DatasetName::Mnist | DatasetName::FashionMnist => IdxPaths::in_dir(&dir).load()?,
            DatasetName::Cifar10 => {
                let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (load_cifar_batches(&batches)?, load_cifar_batches(&[dir.join("test_batch.bin")])?)
            }
        };
        let train = match self.dataset.subset_size {
            Some(n) => train.truncated(n),
            None => train,
        };
        let test = match self.dataset.test_subset_size {
            Some(n) => test.truncated(n),
            None => test,
        };
        if train.is_empty() || test.is_empty() {
            bail!("empty training or test set in {}", dir.display());
        }
        Ok((train, test))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// `rounds.csv` → `rounds.config.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("config.json")
}
