//! Federated rounds: partitioning, local computation, aggregation and the
//! training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gradbits::{clip_gradients, ClipConfig};
use crate::metrics::{evaluate_accuracy, l2_error_norm, RoundMetrics};
use crate::nn::{sgd_step_in_place, Network, NUM_CLASSES};
use crate::seed::{derive_seed, rng_for, stream};
use crate::transport::{AirtimeLedger, SchemeKind, Transport};

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iid,
    Noniid2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPartition {
    pub mode: PartitionMode,
    /// Sample indices held by each client.
    pub clients: Vec<Vec<usize>>,
}

impl DatasetPartition {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// |D_m| / |D| over the given clients.
    pub fn weights(&self, participants: &[usize]) -> Vec<f64> {
        let total: usize = participants.iter().map(|&m| self.clients[m].len()).sum();
        participants.iter().map(|&m| self.clients[m].len() as f64 / total as f64).collect()
    }
}

/// Splits sample indices among `clients`.
///
/// `iid` deals a uniform shuffle into near-equal parts. `noniid2` cuts every
/// class into single-class shards (2M in total, at least one and at most M
/// per class, sized in proportion to the class) and gives client m shards m
/// and m + M, so each client holds exactly two classes (one when M = 1).
pub fn partition_dataset(labels: &[u8], clients: usize, mode: PartitionMode, seed: u64) -> Result<DatasetPartition> {
    if clients == 0 || clients > labels.len() {
        return Err(Error::InfeasiblePartition(format!("{clients} clients for {} samples", labels.len())));
    }
    let mut rng = rng_for(seed, &[stream::PARTITION]);
    if clients == 1 {
        return Ok(DatasetPartition { mode, clients: vec![(0..labels.len()).collect()] });
    }
    let parts = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut rng);
            let (q, r) = (labels.len() / clients, labels.len() % clients);
            let mut out = Vec::with_capacity(clients);
            let mut start = 0;
            for m in 0..clients {
                let len = q + usize::from(m < r);
                let mut part = idx[start..start + len].to_vec();
                part.sort_unstable();
                out.push(part);
                start += len;
            }
            out
        }
        PartitionMode::Noniid2 => noniid2(labels, clients, &mut rng)?,
    };
    Ok(DatasetPartition { mode, clients: parts })
}

fn noniid2(labels: &[u8], clients: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l)].push(i);
    }
    let mut classes: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !by_class[c].is_empty()).collect();
    classes.shuffle(rng);
    let shards = 2 * clients;
    let cap = |c: usize| clients.min(by_class[c].len());
    let capacity: usize = classes.iter().map(|&c| cap(c)).sum();
    if shards < classes.len() || shards > capacity {
        return Err(Error::InfeasiblePartition(format!(
            "{shards} single-class shards cannot cover {} classes with at most {clients} shards each",
            classes.len()
        )));
    }
    // Largest-remainder allocation within [1, cap].
    let total = labels.len() as f64;
    let quota: Vec<f64> = classes.iter().map(|&c| by_class[c].len() as f64 / total * shards as f64).collect();
    let mut alloc: Vec<usize> =
        classes.iter().zip(&quota).map(|(&c, &q)| (q.floor() as usize).clamp(1, cap(c))).collect();
    loop {
        let sum: usize = alloc.iter().sum();
        if sum == shards {
            break;
        }
        let pick = if sum < shards {
            (0..classes.len())
                .filter(|&k| alloc[k] < cap(classes[k]))
                .max_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
        } else {
            (0..classes.len())
                .filter(|&k| alloc[k] > 1)
                .min_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(a.cmp(&b)))
        };
        let k = pick.expect("feasibility checked above");
        if sum < shards {
            alloc[k] += 1;
        } else {
            alloc[k] -= 1;
        }
    }
    let mut shard_list: Vec<Vec<usize>> = Vec::with_capacity(shards);
    for (k, &c) in classes.iter().enumerate() {
        let mut idx = by_class[c].clone();
        idx.shuffle(rng);
        let (q, r) = (idx.len() / alloc[k], idx.len() % alloc[k]);
        let mut start = 0;
        for s in 0..alloc[k] {
            let len = q + usize::from(s < r);
            shard_list.push(idx[start..start + len].to_vec());
            start += len;
        }
    }
    Ok((0..clients)
        .map(|m| {
            let mut part = [shard_list[m].as_slice(), shard_list[m + clients].as_slice()].concat();
            part.sort_unstable();
            part
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LocalMode {
    /// Gradient of the client's mean loss at the broadcast model.
    Fullbatch,
    /// One epoch of mini-batch SGD; reports (w_t − w_final) / η.
    #[default]
    EpochDelta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub mode: LocalMode,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: ClipConfig,
}

/// Identifies a client within a round, for diagnostics and seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientRound {
    pub client: usize,
    pub round: usize,
}

pub fn local_train(
    net: &Network,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    cfg: &LocalConfig,
    at: ClientRound,
    seed: u64,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("client {} holds no samples", at.client)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let non_finite = || Error::NonFiniteLoss { client: at.client, round: at.round };
    let samples = |idx: &[usize]| idx.iter().map(|&i| (data.image(i), data.label(i))).collect::<Vec<_>>();
    let g = match cfg.mode {
        LocalMode::Fullbatch => {
            let (g, loss) = net.batch_gradient(params, samples(indices))?;
            if !loss.is_finite() {
                return Err(non_finite());
            }
            g
        }
        LocalMode::EpochDelta => {
            let mut order = indices.to_vec();
            order.shuffle(&mut rng_for(seed, &[stream::LOCAL, at.client as u64, at.round as u64]));
            let mut w = params.to_vec();
            for batch in order.chunks(cfg.batch_size) {
                let (g, loss) = net.batch_gradient(&w, samples(batch))?;
                if !loss.is_finite() {
                    return Err(non_finite());
                }
                sgd_step_in_place(&mut w, &g, cfg.lr)?;
            }
            params.iter().zip(&w).map(|(a, b)| (a - b) / cfg.lr).collect()
        }
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Err(non_finite());
    }
    clip_gradients(&g, &cfg.clip)
}

/// Weighted sum of client gradients; the weights must sum to one.
pub fn aggregate(gradients: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if gradients.is_empty() || gradients.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: weights.len(), got: gradients.len() });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::WeightSum(sum));
    }
    let n = gradients[0].len();
    let mut out = vec![0.0; n];
    for (g, &w) in gradients.iter().zip(weights) {
        if g.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: g.len() });
        }
        for (o, v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub local_mode: LocalMode,
    /// Clients drawn per round; all of them when unset.
    pub participants: Option<usize>,
    /// Evaluate on the test set after every round. Sweeps that only need the
    /// aggregation error turn this off.
    pub evaluate: bool,
    /// Tolerance on the aggregation ℓ2 error reported per round.
    pub tolerance: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rounds: 30,
            lr: 0.01,
            batch_size: 10,
            local_mode: LocalMode::EpochDelta,
            participants: None,
            evaluate: true,
            tolerance: None,
        }
    }
}

pub struct Experiment<'a> {
    pub net: &'a Network,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a DatasetPartition,
    pub transport: &'a Transport,
    pub config: TrainingConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub rounds: Vec<RoundMetrics>,
    pub params: Vec<f64>,
    /// First round whose update left the global model non-finite.
    pub diverged_at: Option<usize>,
}

struct ClientResult {
    sent: Vec<f64>,
    received: Vec<f64>,
    ledger: AirtimeLedger,
}

/// Runs the federated rounds, calling `on_round` after each one.
///
/// Clients of a round run on the current rayon pool; every random stream is
/// derived from (seed, client, round), so the results do not depend on the
/// pool size.
pub fn run_training<F>(exp: &Experiment, mut on_round: F) -> Result<TrainingOutcome>
where
    F: FnMut(&RoundMetrics) -> Result<()>,
{
    let cfg = exp.config;
    let scheme = *exp.transport.scheme();
    if exp.partition.is_empty() || exp.partition.clients.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidArgument("every client needs at least one sample".into()));
    }
    let m_total = exp.partition.len();
    let participants = cfg.participants.unwrap_or(m_total);
    if participants == 0 || participants > m_total {
        return Err(Error::InvalidArgument(format!("{participants} participants out of {m_total} clients")));
    }
    let local = LocalConfig {
        mode: cfg.local_mode,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        clip: ClipConfig::new(scheme.clip)?,
    };
    let mut params = exp.net.init_params(&mut rng_for(exp.seed, &[stream::INIT]));
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut diverged_at = None;

    for round in 1..=cfg.rounds {
        let mut chosen: Vec<usize> = (0..m_total).collect();
        if participants < m_total {
            chosen.shuffle(&mut rng_for(exp.seed, &[stream::SUBSET, round as u64]));
            chosen.truncate(participants);
            chosen.sort_unstable();
        }
        let mut ledger = AirtimeLedger::default();
        let mut l2_error = f64::NAN;

        if diverged_at.is_none() {
            let results: Vec<Result<ClientResult>> = chosen
                .par_iter()
                .map(|&client| {
                    let at = ClientRound { client, round };
                    let g = local_train(exp.net, &params, exp.train, &exp.partition.clients[client], &local, at, exp.seed)?;
                    let uplink = derive_seed(exp.seed, &[stream::UPLINK, client as u64, round as u64]);
                    let d = exp.transport.send(&g, uplink)?;
                    Ok(ClientResult { sent: d.sent, received: d.received, ledger: d.ledger })
                })
                .collect();
            let mut sent = Vec::with_capacity(results.len());
            let mut received = Vec::with_capacity(results.len());
            let mut failed = None;
            for r in results {
                match r {
                    Ok(c) => {
                        ledger += c.ledger;
                        sent.push(c.sent);
                        received.push(c.received);
                    }
                    Err(e @ Error::NonFiniteLoss { .. }) if scheme.kind == SchemeKind::Naive => {
                        failed.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            if failed.is_some() {
                diverged_at = Some(round);
                params.iter_mut().for_each(|p| *p = f64::NAN);
            } else {
                let weights = exp.partition.weights(&chosen);
                let g_sent = aggregate(&sent, &weights)?;
                let g_hat = aggregate(&received, &weights)?;
                l2_error = l2_error_norm(&g_sent, &g_hat)?;
                sgd_step_in_place(&mut params, &g_hat, cfg.lr)?;
                if params.iter().any(|p| !p.is_finite()) {
                    diverged_at = Some(round);
                }
            }
        }

        let test_accuracy = if cfg.evaluate { evaluate_accuracy(exp.net, &params, exp.test)? } else { f64::NAN };
        let m = RoundMetrics {
            round,
            scheme: scheme.kind,
            snr_db: exp.transport.channel().snr_db,
            modulation: scheme.order,
            clients: chosen.len(),
            sparsity: scheme.sparsity,
            test_accuracy,
            l2_error,
            payload_bits: ledger.payload_bits,
            coded_bits: ledger.coded_bits,
            retx_count: ledger.retransmissions,
            airtime_symbols: ledger.symbols,
            within_tolerance: cfg.tolerance.map(|t| l2_error <= t),
        };
        on_round(&m)?;
        rounds.push(m);
    }
    Ok(TrainingOutcome { rounds, params, diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, NetworkSpec, Shape, Activation};

    fn labels(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % NUM_CLASSES) as u8).collect()
    }

    fn check_cover(p: &DatasetPartition, n: usize) {
        let mut seen = vec![false; n];
        for c in &p.clients {
            for &i in c {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn iid_split() {
        let p = partition_dataset(&labels(1000), 10, PartitionMode::Iid, 1).unwrap();
        assert!(p.clients.iter().all(|c| c.len() == 100));
        check_cover(&p, 1000);
    }

    #[test]
    fn single_client_owns_all() {
        for mode in [PartitionMode::Iid, PartitionMode::Noniid2] {
            let p = partition_dataset(&labels(50), 1, mode, 1).unwrap();
            assert_eq!(p.clients, vec![(0..50).collect::<Vec<_>>()]);
        }
    }

    #[test]
    fn noniid2_two_classes_each() {
        let l = labels(1000);
        for m in [5, 10, 20, 100] {
            let p = partition_dataset(&l, m, PartitionMode::Noniid2, 3).unwrap();
            check_cover(&p, 1000);
            for c in &p.clients {
                let mut cls: Vec<u8> = c.iter().map(|&i| l[i]).collect();
                cls.sort_unstable();
                cls.dedup();
                assert_eq!(cls.len(), 2, "M={m}");
            }
        }
    }

    #[test]
    fn noniid2_unbalanced_classes() {
        let mut l = labels(1000);
        l.extend(std::iter::repeat_n(3u8, 500));
        let p = partition_dataset(&l, 10, PartitionMode::Noniid2, 4).unwrap();
        check_cover(&p, l.len());
        for c in &p.clients {
            let mut cls: Vec<u8> = c.iter().map(|&i| l[i]).collect();
            cls.sort_unstable();
            cls.dedup();
            assert_eq!(cls.len(), 2);
        }
    }

    #[test]
    fn infeasible_partitions() {
        assert!(partition_dataset(&labels(10), 11, PartitionMode::Iid, 1).is_err());
        assert!(partition_dataset(&labels(10), 0, PartitionMode::Iid, 1).is_err());
        // Four shards cannot cover ten classes.
        assert!(partition_dataset(&labels(100), 2, PartitionMode::Noniid2, 1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(aggregate(&[vec![3.0, -1.0]], &[1.0]).unwrap(), vec![3.0, -1.0]);
        let g = [vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]];
        let w = [1.0 / 3.0; 3];
        let mean = aggregate(&g, &w).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-12 && (mean[1] - 5.0).abs() < 1e-12);
        assert!(matches!(aggregate(&g, &[0.5, 0.5, 0.5]), Err(Error::WeightSum(_))));
        assert!(aggregate(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]).is_err());
    }

    fn tiny() -> (Network, Dataset) {
        let net = Network::new(NetworkSpec {
            input: Shape::flat(4),
            layers: vec![Layer::dense(4, 5, Activation::Sigmoid), Layer::dense(5, NUM_CLASSES, Activation::Identity)],
        })
        .unwrap();
        let pixels: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let data = Dataset::new(Shape::flat(4), pixels, (0..10).map(|i| (i % 3) as u8).collect()).unwrap();
        (net, data)
    }

    #[test]
    fn epoch_delta_single_batch_equals_fullbatch() {
        let (net, data) = tiny();
        let params = net.init_params(&mut rng_for(1, &[]));
        let idx: Vec<usize> = (0..4).collect();
        let cfg = LocalConfig { mode: LocalMode::EpochDelta, lr: 0.01, batch_size: 10, clip: ClipConfig::new(1e6).unwrap() };
        let at = ClientRound { client: 0, round: 1 };
        let delta = local_train(&net, &params, &data, &idx, &cfg, at, 9).unwrap();
        let full = local_train(&net, &params, &data, &idx, &LocalConfig { mode: LocalMode::Fullbatch, ..cfg }, at, 9).unwrap();
        for (a, b) in delta.iter().zip(&full) {
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn fullbatch_is_mean_of_two_samples() {
        let (net, data) = tiny();
        let params = net.init_params(&mut rng_for(2, &[]));
        let cfg = LocalConfig { mode: LocalMode::Fullbatch, lr: 0.01, batch_size: 10, clip: ClipConfig::new(1e6).unwrap() };
        let g = local_train(&net, &params, &data, &[2, 5], &cfg, ClientRound { client: 0, round: 0 }, 0).unwrap();
        let one = |i: usize| net.backward(&params, &net.forward(&params, data.image(i)).unwrap(), data.label(i)).unwrap();
        let (a, b) = (one(2), one(5));
        for k in 0..g.len() {
            assert!((g[k] - 0.5 * (a[k] + b[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn local_output_is_clipped() {
        let (net, data) = tiny();
        let params: Vec<f64> = (0..net.param_count()).map(|i| (i % 5) as f64).collect();
        let cfg = LocalConfig { mode: LocalMode::Fullbatch, lr: 0.01, batch_size: 10, clip: ClipConfig::new(0.01).unwrap() };
        let g = local_train(&net, &params, &data, &[0, 1, 2], &cfg, ClientRound { client: 0, round: 0 }, 0).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 0.01));
        assert!(local_train(&net, &params, &data, &[], &cfg, ClientRound { client: 0, round: 0 }, 0).is_err());
    }
}
