//! Uplink schemes and air-time accounting.
//!
//! * `approximate`: no FEC and no retransmission; the receiver clears the
//!   exponent MSB of every word and keeps the other bits as received.
//! * `naive`: the same link without the mask.
//! * `ecrt`: exact delivery behind a rate-1/2, length-648 LDPC code modelled by
//!   its correction radius, with whole-codeword retransmission.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{link, ChannelParams};
use crate::error::{Error, Result};
use crate::gradbits::{
    clip_gradients, deinterleave, encode_gradients, interleave, interleave_units, BitFrame, ClipConfig,
    DEFAULT_INTERLEAVER_DEPTH, WORD_BITS,
};
use crate::modem::{bit_reliability_order, build_constellation, neighbor_error_table, ConstellationMap};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Approximate,
    Ecrt,
    Naive,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Approximate => "approximate",
            SchemeKind::Ecrt => "ecrt",
            SchemeKind::Naive => "naive",
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approximate" => Ok(SchemeKind::Approximate),
            "ecrt" => Ok(SchemeKind::Ecrt),
            "naive" => Ok(SchemeKind::Naive),
            other => Err(Error::InvalidArgument(format!("unknown transport scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    #[default]
    Sequential,
    MsbAligned,
}

/// Bounded-distance abstraction of the LDPC code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FecModel {
    pub codeword_len: usize,
    pub code_rate: f64,
    pub min_distance: usize,
    pub max_transmissions: u32,
}

impl Default for FecModel {
    fn default() -> Self {
        FecModel { codeword_len: 648, code_rate: 0.5, min_distance: 15, max_transmissions: 10_000 }
    }
}

impl FecModel {
    pub fn info_bits(&self) -> usize {
        (self.codeword_len as f64 * self.code_rate).round() as usize
    }

    /// Bit errors a codeword survives: ⌊(d_min − 1) / 2⌋.
    pub fn correctable(&self) -> usize {
        (self.min_distance.saturating_sub(1)) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.codeword_len == 0
            || !(self.code_rate > 0.0 && self.code_rate <= 1.0)
            || self.info_bits() == 0
            || self.max_transmissions == 0
        {
            return Err(Error::InvalidArgument(format!("invalid FEC model {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportScheme {
    pub kind: SchemeKind,
    pub order: usize,
    pub packing: Packing,
    pub sparsity: f64,
    pub clip: f64,
    pub interleaver_depth: usize,
    /// Charge ⌈log2 N⌉ bits per sparse index on the side channel.
    pub charge_index_bits: bool,
    pub fec: FecModel,
}

impl Default for TransportScheme {
    fn default() -> Self {
        TransportScheme {
            kind: SchemeKind::Approximate,
            order: 4,
            packing: Packing::Sequential,
            sparsity: 1.0,
            clip: 1.0,
            interleaver_depth: DEFAULT_INTERLEAVER_DEPTH,
            charge_index_bits: false,
            fec: FecModel::default(),
        }
    }
}

impl TransportScheme {
    pub fn new(kind: SchemeKind, order: usize) -> Self {
        TransportScheme { kind, order, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        build_constellation(self.order)?;
        ClipConfig::new(self.clip)?;
        self.fec.validate()?;
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!("sparsity rate {} outside (0, 1]", self.sparsity)));
        }
        if self.interleaver_depth == 0 {
            return Err(Error::InvalidArgument("interleaver depth must be positive".into()));
        }
        Ok(())
    }
}

/// Air-time bookkeeping of one or more transmissions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirtimeLedger {
    pub payload_bits: u64,
    pub coded_bits: u64,
    pub codewords: u64,
    pub retransmissions: u64,
    pub index_bits: u64,
    pub symbols: u64,
}

impl AirtimeLedger {
    pub fn airtime_seconds(&self, symbol_duration_s: f64) -> f64 {
        self.symbols as f64 * symbol_duration_s
    }
}

impl std::ops::AddAssign for AirtimeLedger {
    fn add_assign(&mut self, o: Self) {
        self.payload_bits += o.payload_bits;
        self.coded_bits += o.coded_bits;
        self.codewords += o.codewords;
        self.retransmissions += o.retransmissions;
        self.index_bits += o.index_bits;
        self.symbols += o.symbols;
    }
}

/// Outcome of one uplink transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    /// What an error-free link would deliver: clipped, sparsified and cast
    /// to binary32.
    pub sent: Vec<f64>,
    pub received: Vec<f64>,
    pub ledger: AirtimeLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub values: Vec<f64>,
    /// Ascending positions of `values` in the dense vector.
    pub indices: Vec<usize>,
    pub len: usize,
}

pub fn sparse_count(rate: f64, n: usize) -> usize {
    // The small slack keeps products such as 0.1 * 21840 from rounding up.
    ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps the `⌈rate·N⌉` entries of largest magnitude (ties to lower index).
pub fn sparsify(g: &[f64], rate: f64) -> Result<SparseGradient> {
    if g.is_empty() {
        return Err(Error::InvalidArgument("cannot sparsify an empty gradient".into()));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("sparsity rate {rate} outside (0, 1]")));
    }
    let k = sparse_count(rate, g.len());
    let mut order: Vec<usize> = (0..g.len()).collect();
    if k < g.len() {
        let by_magnitude = |&a: &usize, &b: &usize| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b));
        order.select_nth_unstable_by(k - 1, by_magnitude);
        order.truncate(k);
        order.sort_unstable();
    }
    Ok(SparseGradient { values: order.iter().map(|&i| g[i]).collect(), indices: order, len: g.len() })
}

pub fn desparsify(values: &[f64], indices: &[usize], len: usize) -> Result<Vec<f64>> {
    if values.len() != indices.len() {
        return Err(Error::ShapeMismatch { expected: indices.len(), got: values.len() });
    }
    let mut out = vec![0.0; len];
    for (&i, &v) in indices.iter().zip(values) {
        if i >= len {
            return Err(Error::InvalidArgument(format!("index {i} outside gradient of length {len}")));
        }
        out[i] = v;
    }
    Ok(out)
}

/// Bit permutation placing each word's low-index bits (sign, exponent) in the
/// most reliable symbol slots.
///
/// Words are taken in blocks of `bits_per_symbol` words (32 symbols). Within
/// a block the bits ordered by (bit index, word) fill the slots ordered by
/// (reliability rank, symbol). A trailing partial block uses the same rule
/// over fewer symbols. When every slot is equally reliable (QPSK) the
/// permutation is the identity.
pub fn msb_aligned_permutation(word_count: usize, map: &ConstellationMap) -> Vec<usize> {
    let k = map.bits_per_symbol();
    let n_bits = word_count * WORD_BITS;
    let totals = neighbor_error_table(map).position_totals();
    if totals.iter().all(|&t| t == totals[0]) {
        return (0..n_bits).collect();
    }
    let ranking = bit_reliability_order(map);
    let mut dest = vec![0usize; n_bits];
    let mut word0 = 0;
    while word0 < word_count {
        let words = k.min(word_count - word0);
        let symbols = WORD_BITS * words / k;
        let base = word0 * WORD_BITS;
        let ranking = &ranking;
        let mut slots = (0..k).flat_map(|rank| (0..symbols).map(move |s| s * k + ranking[rank]));
        for j in 0..WORD_BITS {
            for w in 0..words {
                dest[base + w * WORD_BITS + j] = base + slots.next().expect("slot count equals bit count");
            }
        }
        word0 += words;
    }
    dest
}

pub fn pack_msb_aligned(f: &BitFrame, map: &ConstellationMap) -> Result<BitFrame> {
    if f.is_interleaved() {
        return Err(Error::InvalidArgument("pack before interleaving".into()));
    }
    let dest = msb_aligned_permutation(f.word_count, map);
    let mut bits = vec![0u8; f.bits.len()];
    for (src, &d) in dest.iter().enumerate() {
        bits[d] = f.bits[src];
    }
    Ok(BitFrame { bits, ..f.clone() })
}

pub fn unpack_msb_aligned(f: &BitFrame, map: &ConstellationMap) -> Result<BitFrame> {
    if f.is_interleaved() {
        return Err(Error::InvalidArgument("deinterleave before unpacking".into()));
    }
    let dest = msb_aligned_permutation(f.word_count, map);
    let bits = dest.iter().map(|&d| f.bits[d]).collect();
    Ok(BitFrame { bits, ..f.clone() })
}

/// P(X > k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(n: usize, p: f64, k: usize) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return if k < n { 1.0 } else { 0.0 };
    }
    let mut log_pmf = n as f64 * (1.0 - p).ln();
    let mut cdf = 0.0;
    for i in 0..=k.min(n) {
        if i > 0 {
            log_pmf += ((n - i + 1) as f64).ln() - (i as f64).ln() + p.ln() - (1.0 - p).ln();
        }
        cdf += log_pmf.exp();
    }
    (1.0 - cdf).max(0.0)
}

/// A configured uplink: scheme, constellation and channel.
#[derive(Debug, Clone)]
pub struct Transport {
    scheme: TransportScheme,
    map: ConstellationMap,
    channel: ChannelParams,
    clip: ClipConfig,
}

impl Transport {
    pub fn new(scheme: TransportScheme, channel: ChannelParams) -> Result<Self> {
        scheme.validate()?;
        channel.validate()?;
        Ok(Transport {
            map: build_constellation(scheme.order)?,
            clip: ClipConfig::new(scheme.clip)?,
            scheme,
            channel,
        })
    }

    pub fn scheme(&self) -> &TransportScheme {
        &self.scheme
    }

    pub fn channel(&self) -> &ChannelParams {
        &self.channel
    }

    pub fn constellation(&self) -> &ConstellationMap {
        &self.map
    }

    /// Clip, sparsify, send over the configured scheme and re-expand.
    pub fn send(&self, g: &[f64], seed: u64) -> Result<Delivery> {
        let clipped = clip_gradients(g, &self.clip)?;
        if self.scheme.sparsity >= 1.0 || clipped.is_empty() {
            return self.send_dense(&clipped, seed);
        }
        let sparse = sparsify(&clipped, self.scheme.sparsity)?;
        let inner = self.send_dense(&sparse.values, seed)?;
        let mut ledger = inner.ledger;
        if self.scheme.charge_index_bits {
            let per_index = (usize::BITS - (sparse.len - 1).max(1).leading_zeros()) as u64;
            ledger.index_bits = per_index * sparse.indices.len() as u64;
            ledger.symbols += ledger.index_bits.div_ceil(self.map.bits_per_symbol() as u64);
        }
        Ok(Delivery {
            sent: desparsify(&inner.sent, &sparse.indices, sparse.len)?,
            received: desparsify(&inner.received, &sparse.indices, sparse.len)?,
            ledger,
        })
    }

    fn send_dense(&self, g: &[f64], seed: u64) -> Result<Delivery> {
        match self.scheme.kind {
            SchemeKind::Approximate => self.send_approximate(g, seed),
            SchemeKind::Naive => self.send_naive(g, seed),
            SchemeKind::Ecrt => self.send_ecrt(g, seed),
        }
    }

    fn uncoded_ledger(&self, words: usize) -> AirtimeLedger {
        let bits = (words * WORD_BITS) as u64;
        AirtimeLedger {
            payload_bits: bits,
            coded_bits: bits,
            symbols: bits.div_ceil(self.map.bits_per_symbol() as u64),
            ..Default::default()
        }
    }

    /// encode → (pack) → interleave → modulate → channel → demodulate →
    /// deinterleave → (unpack), returning the received, still unmasked frame.
    fn carry(&self, frame: &BitFrame, seed: u64) -> Result<BitFrame> {
        let k = self.map.bits_per_symbol();
        let depth = self.scheme.interleaver_depth;
        let tx = match self.scheme.packing {
            Packing::Sequential => interleave(frame, depth)?,
            Packing::MsbAligned => interleave_units(&pack_msb_aligned(frame, &self.map)?, depth, k)?,
        };
        let rx_bits = link(&tx.bits, &self.map, &self.channel, seed)?;
        let rx = deinterleave(&BitFrame { bits: rx_bits, ..tx })?;
        match self.scheme.packing {
            Packing::Sequential => Ok(rx),
            Packing::MsbAligned => unpack_msb_aligned(&rx, &self.map),
        }
    }

    fn send_uncoded(&self, g: &[f64], seed: u64, mask: bool) -> Result<Delivery> {
        let frame = encode_gradients(g)?;
        let sent = frame.words().iter().map(|w| f64::from(w.value())).collect();
        let mut rx = self.carry(&frame, seed)?;
        if mask {
            rx.mask_words();
        }
        let received = rx.words().iter().map(|w| f64::from(w.value())).collect();
        Ok(Delivery { sent, received, ledger: self.uncoded_ledger(g.len()) })
    }

    pub fn send_approximate(&self, g: &[f64], seed: u64) -> Result<Delivery> {
        self.send_uncoded(&clip_gradients(g, &self.clip)?, seed, true)
    }

    pub fn send_naive(&self, g: &[f64], seed: u64) -> Result<Delivery> {
        self.send_uncoded(&clip_gradients(g, &self.clip)?, seed, false)
    }

    /// One transmission attempt of a codeword; returns its bit-error count.
    ///
    /// Codewords are channel-interleaved across symbols: each coded bit rides
    /// its own modulation symbol (cycling through the slot positions) while
    /// the remaining slots carry other traffic, modelled as random filler.
    /// Coded bits therefore see independent fading.
    pub fn codeword_errors(&self, seed: u64) -> Result<usize> {
        let k = self.map.bits_per_symbol();
        let n = self.scheme.fec.codeword_len;
        let mut rng = rng_for(seed, &[0]);
        let bits: Vec<u8> = (0..n * k).map(|_| rng.random_range(0..2u8)).collect();
        let got = link(&bits, &self.map, &self.channel, derive_seed(seed, &[1]))?;
        Ok((0..n).filter(|&i| {
            let pos = i * k + i % k;
            bits[pos] != got[pos]
        })
        .count())
    }

    pub fn send_ecrt(&self, g: &[f64], seed: u64) -> Result<Delivery> {
        let frame = encode_gradients(&clip_gradients(g, &self.clip)?)?;
        let sent: Vec<f64> = frame.words().iter().map(|w| f64::from(w.value())).collect();
        let fec = self.scheme.fec;
        let payload = frame.len() as u64;
        let codewords = payload.div_ceil(fec.info_bits() as u64);
        let mut retransmissions = 0u64;
        let noiseless = self.channel.is_noiseless();
        for cw in 0..codewords {
            if noiseless {
                continue;
            }
            let mut attempt = 0u32;
            while self.codeword_errors(derive_seed(seed, &[cw, u64::from(attempt)]))? > fec.correctable() {
                attempt += 1;
                retransmissions += 1;
                if attempt >= fec.max_transmissions {
                    return Err(Error::RetransmissionCap { codeword: cw as usize, cap: fec.max_transmissions });
                }
            }
        }
        let coded_bits = (codewords + retransmissions) * fec.codeword_len as u64;
        let ledger = AirtimeLedger {
            payload_bits: payload,
            coded_bits,
            codewords,
            retransmissions,
            index_bits: 0,
            symbols: coded_bits.div_ceil(self.map.bits_per_symbol() as u64),
        };
        Ok(Delivery { received: sent.clone(), sent, ledger })
    }

    /// Fraction of independent first attempts that exceed the correction
    /// radius, with its 95% binomial half-width.
    pub fn codeword_failure_rate(&self, attempts: usize, seed: u64) -> Result<(f64, f64)> {
        let t = self.scheme.fec.correctable();
        let mut failures = 0usize;
        for a in 0..attempts {
            if self.codeword_errors(derive_seed(seed, &[u64::MAX, a as u64]))? > t {
                failures += 1;
            }
        }
        let p = failures as f64 / attempts as f64;
        Ok((p, 1.96 * (p * (1.0 - p) / attempts as f64).sqrt()))
    }
}

pub fn send_approximate(g: &[f64], scheme: &TransportScheme, channel: &ChannelParams, seed: u64) -> Result<Delivery> {
    Transport::new(TransportScheme { kind: SchemeKind::Approximate, ..*scheme }, *channel)?.send(g, seed)
}

pub fn send_naive(g: &[f64], scheme: &TransportScheme, channel: &ChannelParams, seed: u64) -> Result<Delivery> {
    Transport::new(TransportScheme { kind: SchemeKind::Naive, ..*scheme }, *channel)?.send(g, seed)
}

pub fn send_ecrt(g: &[f64], scheme: &TransportScheme, channel: &ChannelParams, seed: u64) -> Result<Delivery> {
    Transport::new(TransportScheme { kind: SchemeKind::Ecrt, ..*scheme }, *channel)?.send(g, seed)
}
