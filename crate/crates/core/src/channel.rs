//! Flat-fading uplink channel `r = c·s + n` with `c = sqrt(p·d^-α)·h`.
//!
//! SNR is the average received per-symbol SNR, `E[p·d^-α·|h|^2] / σ²`, with
//! `E|h|^2 = 1` and unit-energy constellations. The noise variance is derived
//! from it.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modem::{build_constellation, ConstellationMap};
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    /// i.i.d. Rayleigh coefficient per symbol.
    #[default]
    RayleighFast,
    /// One Rayleigh coefficient per transmitted frame.
    RayleighBlock,
    /// Deterministic path loss only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    /// Average received per-symbol SNR in dB. `+inf` gives a noiseless channel
    /// and is written as the string `"inf"` in JSON.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    #[serde(rename = "d")]
    pub distance_m: f64,
    #[serde(rename = "alpha")]
    pub pathloss_exp: f64,
    pub tx_power: f64,
    pub fading: Fading,
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Snr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Snr::deserialize(d)? {
            Snr::Number(v) => Ok(v),
            Snr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Snr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got `{t}`"))),
        }
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            snr_db: 20.0,
            distance_m: 10.0,
            pathloss_exp: 3.0,
            tx_power: 1.0,
            fading: Fading::RayleighFast,
        }
    }
}

impl ChannelParams {
    pub fn with_snr(snr_db: f64) -> Self {
        ChannelParams { snr_db, ..Default::default() }
    }

    /// Path loss only, no noise: every symbol arrives as `sqrt(p·d^-α)·s`.
    pub fn noiseless() -> Self {
        ChannelParams { snr_db: f64::INFINITY, fading: Fading::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.distance_m > 0.0
            && self.distance_m.is_finite()
            && self.pathloss_exp.is_finite()
            && self.tx_power > 0.0
            && self.tx_power.is_finite()
            && !self.snr_db.is_nan()
            && self.snr_db != f64::NEG_INFINITY;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid channel parameters {self:?}")))
        }
    }

    /// Deterministic large-scale gain `p·d^-α`.
    pub fn pathloss_gain(&self) -> f64 {
        self.tx_power * self.distance_m.powf(-self.pathloss_exp)
    }

    pub fn noise_variance(&self) -> f64 {
        self.pathloss_gain() / 10f64.powf(self.snr_db / 10.0)
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_variance() == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub gains: Vec<Complex64>,
    pub noise: Vec<Complex64>,
    pub seed: u64,
}

fn complex_normal(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Draws (gain, noise) pairs symbol by symbol from one seeded stream.
struct ChannelSampler {
    rng: ChaCha8Rng,
    /// Per-component standard deviations of the fast-fading gain and noise.
    gain_sd: f64,
    noise_sd: f64,
    fading: Fading,
    block_gain: Complex64,
}

impl ChannelSampler {
    fn new(params: &ChannelParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let amplitude = params.pathloss_gain().sqrt();
        let block_gain = match params.fading {
            Fading::RayleighBlock => complex_normal(&mut rng, 1.0) * amplitude,
            _ => Complex64::new(amplitude, 0.0),
        };
        Ok(ChannelSampler {
            rng,
            gain_sd: amplitude * std::f64::consts::FRAC_1_SQRT_2,
            noise_sd: (params.noise_variance() / 2.0).sqrt(),
            fading: params.fading,
            block_gain,
        })
    }

    #[inline]
    fn pair(&mut self, sd: f64) -> Complex64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(re * sd, im * sd)
    }

    #[inline]
    fn next(&mut self) -> (Complex64, Complex64) {
        let gain = match self.fading {
            Fading::RayleighFast => self.pair(self.gain_sd),
            Fading::RayleighBlock | Fading::None => self.block_gain,
        };
        let noise = if self.noise_sd == 0.0 { Complex64::new(0.0, 0.0) } else { self.pair(self.noise_sd) };
        (gain, noise)
    }
}

/// Samples one channel realization for `symbols` and applies it.
pub fn transmit(
    symbols: &[Complex64],
    params: &ChannelParams,
    seed: u64,
) -> Result<(Vec<Complex64>, ChannelRealization)> {
    let mut sampler = ChannelSampler::new(params, seed)?;
    let n = symbols.len();
    let mut gains = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut received = Vec::with_capacity(n);
    for s in symbols {
        let (c, w) = sampler.next();
        gains.push(c);
        noise.push(w);
        received.push(c * s + w);
    }
    Ok((received, ChannelRealization { gains, noise, seed }))
}

/// Sends `bits` through modulate → transmit → demodulate and returns the
/// received bits. Equivalent to composing those three calls, without keeping
/// the realization.
pub fn link(bits: &[u8], map: &ConstellationMap, params: &ChannelParams, seed: u64) -> Result<Vec<u8>> {
    let k = map.bits_per_symbol();
    if !bits.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!("{} bits is not a multiple of {k} bits per symbol", bits.len())));
    }
    let mut sampler = ChannelSampler::new(params, seed)?;
    let mut out = Vec::with_capacity(bits.len());
    for chunk in bits.chunks_exact(k) {
        let label = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1));
        let (c, w) = sampler.next();
        let r = c * map.point(label) + w;
        let got = map.decide(r, c).unwrap_or(0);
        for s in (0..k).rev() {
            out.push(((got >> s) & 1) as u8);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerEstimate {
    pub ber: f64,
    /// 95% confidence half-width.
    pub ci_halfwidth: f64,
    pub bit_errors: u64,
    pub n_bits: u64,
}

const BER_CHUNK_SYMBOLS: usize = 1 << 16;

#[derive(Default, Clone, Copy)]
struct ErrorTally {
    symbols: u64,
    errors: u64,
    errors_sq: u64,
}

fn ber_chunk(
    map: &ConstellationMap,
    params: &ChannelParams,
    n_symbols: usize,
    seed: u64,
) -> Result<ErrorTally> {
    let k = map.bits_per_symbol();
    let mut rng = rng_for(seed, &[0]);
    let bits: Vec<u8> = (0..n_symbols * k).map(|_| rng.random_range(0..2u8)).collect();
    let rx = link(&bits, map, params, derive_seed(seed, &[1]))?;
    let mut tally = ErrorTally { symbols: n_symbols as u64, ..Default::default() };
    for (a, b) in bits.chunks_exact(k).zip(rx.chunks_exact(k)) {
        let e = a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
        tally.errors += e;
        tally.errors_sq += e * e;
    }
    Ok(tally)
}

/// Monte Carlo BER of random bits over the fast-fading channel.
///
/// Work is split into fixed chunks with derived seeds and run on the current
/// rayon pool; the result does not depend on the pool size. The confidence
/// half-width treats symbols as the independent unit, since the bits of one
/// symbol share a fading coefficient.
pub fn measure_ber(order: usize, snr_db: f64, n_bits: u64, seed: u64) -> Result<BerEstimate> {
    if n_bits == 0 {
        return Err(Error::InvalidArgument("n_bits must be positive".into()));
    }
    let map = build_constellation(order)?;
    let params = ChannelParams { fading: Fading::RayleighFast, ..ChannelParams::with_snr(snr_db) };
    params.validate()?;
    let k = map.bits_per_symbol() as u64;
    let total_symbols = n_bits.div_ceil(k) as usize;
    let chunks = total_symbols.div_ceil(BER_CHUNK_SYMBOLS);
    let base = derive_seed(seed, &[stream::BER, order as u64, snr_db.to_bits()]);
    let tallies = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = BER_CHUNK_SYMBOLS.min(total_symbols - c * BER_CHUNK_SYMBOLS);
            ber_chunk(&map, &params, n, derive_seed(base, &[c as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tallies.iter().fold(ErrorTally::default(), |acc, t| ErrorTally {
        symbols: acc.symbols + t.symbols,
        errors: acc.errors + t.errors,
        errors_sq: acc.errors_sq + t.errors_sq,
    });
    let n_sym = total.symbols as f64;
    let bits = total.symbols * k;
    let ber = total.errors as f64 / bits as f64;
    let mean = total.errors as f64 / n_sym;
    let var = if total.symbols > 1 {
        ((total.errors_sq as f64 - n_sym * mean * mean) / (n_sym - 1.0)).max(0.0)
    } else {
        0.0
    };
    let ci_halfwidth = 1.96 * (var / n_sym).sqrt() / k as f64;
    Ok(BerEstimate { ber, ci_halfwidth, bit_errors: total.errors, n_bits: bits })
}

fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Exact AWGN bit error probability of gray-coded square M-QAM at per-symbol
/// SNR `gamma_s`: each axis is a √M-PAM, and the error of the k-th bit of an
/// axis is an alternating sum of Q-function terms over the decision
/// boundaries it crosses.
pub fn awgn_gray_qam_ber(order: usize, gamma_s: f64) -> f64 {
    let side = (order as f64).sqrt().round() as usize;
    let axis_bits = side.trailing_zeros() as usize;
    let arg = (3.0 * gamma_s / (order as f64 - 1.0)).sqrt();
    let mut total = 0.0;
    for k in 1..=axis_bits {
        let half = 1usize << (k - 1);
        let terms = side - (side >> k);
        let mut pk = 0.0;
        for i in 0..terms {
            let floor_term = i * half / side;
            let sign = if floor_term.is_multiple_of(2) { 1.0 } else { -1.0 };
            let weight = half as f64 - ((i * half) as f64 / side as f64 + 0.5).floor();
            pk += sign * weight * 2.0 * q_function((2 * i + 1) as f64 * arg);
        }
        total += pk / side as f64;
    }
    total / axis_bits as f64
}

/// Fading-averaged BER under Rayleigh fading at average per-symbol SNR.
///
/// QPSK uses the closed form `½(1 − sqrt(γb/(1+γb)))`, `γb = γs/2`. Higher
/// orders average [`awgn_gray_qam_ber`] over the exponential SNR density by
/// composite Simpson quadrature in `u = sqrt(γ/γ̄)`.
pub fn rayleigh_ber_oracle(order: usize, snr_db: f64) -> Result<f64> {
    build_constellation(order)?;
    let gamma = 10f64.powf(snr_db / 10.0);
    if order == 4 {
        let gb = gamma / 2.0;
        return Ok(0.5 * (1.0 - (gb / (1.0 + gb)).sqrt()));
    }
    // ∫0^∞ P(γ̄t) e^{-t} dt = ∫0^∞ 2u P(γ̄u²) e^{-u²} du; the tail beyond u = 8
    // is below e^-64.
    let intervals = 40_000;
    let upper = 8.0;
    let h = upper / intervals as f64;
    let f = |u: f64| 2.0 * u * awgn_gray_qam_ber(order, gamma * u * u) * (-u * u).exp();
    let mut sum = f(0.0) + f(upper);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(i as f64 * h);
    }
    Ok(sum * h / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::{demodulate, modulate};

    fn ones(n: usize) -> Vec<Complex64> {
        vec![Complex64::new(0.6, -0.8); n]
    }

    #[test]
    fn link_equals_composition() {
        for order in [4, 16, 256] {
            let map = build_constellation(order).unwrap();
            let k = map.bits_per_symbol();
            let bits: Vec<u8> = (0..k * 500).map(|i| ((i * 7 + i / 3) % 2) as u8).collect();
            for fading in [Fading::RayleighFast, Fading::RayleighBlock, Fading::None] {
                let p = ChannelParams { fading, ..ChannelParams::with_snr(5.0) };
                let (rx, real) = transmit(&modulate(&bits, &map).unwrap(), &p, 11).unwrap();
                let composed = demodulate(&rx, &real.gains, &map).unwrap().bits;
                assert_eq!(link(&bits, &map, &p, 11).unwrap(), composed);
            }
        }
    }

    #[test]
    fn noiseless_limit() {
        let p = ChannelParams::noiseless();
        let s = ones(5);
        let (rx, real) = transmit(&s, &p, 1).unwrap();
        let a = (10f64).powf(-3.0).sqrt();
        for (r, x) in rx.iter().zip(&s) {
            assert!((r - x * a).norm() < 1e-18);
        }
        assert!(real.noise.iter().all(|n| n.norm() == 0.0));
    }

    #[test]
    fn deterministic_realization() {
        let p = ChannelParams::with_snr(5.0);
        let a = transmit(&ones(100), &p, 42).unwrap();
        let b = transmit(&ones(100), &p, 42).unwrap();
        assert_eq!(a, b);
        let c = transmit(&ones(100), &p, 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn block_fading_constant_per_frame() {
        let p = ChannelParams { fading: Fading::RayleighBlock, ..ChannelParams::with_snr(10.0) };
        let (_, real) = transmit(&ones(50), &p, 9).unwrap();
        assert!(real.gains.iter().all(|&g| g == real.gains[0]));
    }

    #[test]
    fn mean_gain_power_matches_pathloss() {
        let p = ChannelParams::with_snr(10.0);
        let n = 1_000_000;
        let (_, real) = transmit(&ones(n), &p, 5).unwrap();
        let mean = real.gains.iter().map(|g| g.norm_sqr()).sum::<f64>() / n as f64;
        let expected = p.pathloss_gain();
        assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
        let nv = real.noise.iter().map(|g| g.norm_sqr()).sum::<f64>() / n as f64;
        assert!((nv / p.noise_variance() - 1.0).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_params() {
        let p = ChannelParams { distance_m: 0.0, ..Default::default() };
        assert!(transmit(&ones(1), &p, 0).is_err());
        assert!(measure_ber(4, 10.0, 0, 1).is_err());
        assert!(measure_ber(8, 10.0, 100, 1).is_err());
    }

    /// Closed-form Rayleigh average of each Q-term: E[Q(a sqrt(γ))] with γ
    /// exponential of mean g equals ½(1 − sqrt(a²g/2 / (1 + a²g/2))).
    fn closed_form_rayleigh(order: usize, snr_db: f64) -> f64 {
        let g = 10f64.powf(snr_db / 10.0);
        let side = (order as f64).sqrt().round() as usize;
        let axis_bits = side.trailing_zeros() as usize;
        let c = 3.0 / (order as f64 - 1.0);
        let avg_q = |m: f64| {
            let x = m * m * c * g / 2.0;
            0.5 * (1.0 - (x / (1.0 + x)).sqrt())
        };
        let mut total = 0.0;
        for k in 1..=axis_bits {
            let half = 1usize << (k - 1);
            let mut pk = 0.0;
            for i in 0..side - (side >> k) {
                let sign = if (i * half / side).is_multiple_of(2) { 1.0 } else { -1.0 };
                let weight = half as f64 - ((i * half) as f64 / side as f64 + 0.5).floor();
                pk += sign * weight * 2.0 * avg_q((2 * i + 1) as f64);
            }
            total += pk / side as f64;
        }
        total / axis_bits as f64
    }

    #[test]
    fn oracle_closed_forms() {
        let q10 = rayleigh_ber_oracle(4, 10.0).unwrap();
        assert!((q10 - 0.5 * (1.0 - (5.0f64 / 6.0).sqrt())).abs() < 1e-15);
        assert!((q10 - 4.36e-2).abs() < 0.005e-2);
        let q0 = rayleigh_ber_oracle(4, 0.0).unwrap();
        assert!((q0 - 0.5 * (1.0 - (1.0f64 / 3.0).sqrt())).abs() < 1e-15);
        assert!((q0 - 2.11e-1).abs() < 0.005e-1);
        // QPSK through the general formula agrees with the closed form.
        assert!((closed_form_rayleigh(4, 10.0) - q10).abs() < 1e-12);
        for order in [16, 256] {
            for snr in [0.0, 10.0, 16.0, 20.0, 26.1, 36.5] {
                let quad = rayleigh_ber_oracle(order, snr).unwrap();
                let exact = closed_form_rayleigh(order, snr);
                assert!((quad / exact - 1.0).abs() < 1e-6, "{order} {snr}: {quad} vs {exact}");
            }
        }
        let q16 = rayleigh_ber_oracle(16, 16.0).unwrap();
        assert!((q16 / 4.36e-2 - 1.0).abs() < 0.05, "{q16}");
    }

    #[test]
    fn awgn_qpsk_is_q_of_sqrt_gamma() {
        for g in [0.5, 1.0, 10.0] {
            assert!((awgn_gray_qam_ber(4, g) - q_function(g.sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_monotone_and_ordered() {
        for order in [4, 16, 256] {
            let mut prev = 1.0;
            for snr in (0..=40).step_by(2) {
                let b = rayleigh_ber_oracle(order, snr as f64).unwrap();
                assert!(b <= prev);
                prev = b;
            }
        }
        for snr in [0.0, 10.0, 20.0] {
            let b: Vec<f64> = [4, 16, 256].iter().map(|&o| rayleigh_ber_oracle(o, snr).unwrap()).collect();
            assert!(b[0] < b[1] && b[1] < b[2]);
        }
    }

    #[test]
    fn measured_ber_tracks_oracle() {
        for (order, snr) in [(4, 10.0), (16, 10.0), (256, 20.0)] {
            let est = measure_ber(order, snr, 400_000, 7).unwrap();
            let oracle = rayleigh_ber_oracle(order, snr).unwrap();
            assert!(
                (est.ber - oracle).abs() <= 3.0 * est.ci_halfwidth,
                "order {order} snr {snr}: {est:?} vs {oracle}"
            );
        }
    }
}
