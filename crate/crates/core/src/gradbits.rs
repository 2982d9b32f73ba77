//! Bit-level handling of gradient payloads.
//!
//! Gradients travel as IEEE-754 binary32 words. Bit index 0 of a word is the
//! sign, indices 1..=8 the exponent (index 1 is its MSB) and 9..=31 the
//! fraction. On the wire words are laid out word-major with bit 0 first,
//! before interleaving.

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 32;

/// Interleaver depth used by the transports: one row per float of a 32-row block.
pub const DEFAULT_INTERLEAVER_DEPTH: usize = 32;

/// A 32-bit pattern interpreted as binary32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Word32(pub u32);

impl Word32 {
    pub fn from_f32(v: f32) -> Self {
        Word32(v.to_bits())
    }

    pub fn value(self) -> f32 {
        f32::from_bits(self.0)
    }

    /// Bit at wire index `i` (0 = sign).
    pub fn bit(self, i: usize) -> u8 {
        debug_assert!(i < WORD_BITS);
        ((self.0 >> (31 - i)) & 1) as u8
    }

    pub fn with_bit(self, i: usize, b: u8) -> Self {
        let mask = 1u32 << (31 - i);
        if b == 0 {
            Word32(self.0 & !mask)
        } else {
            Word32(self.0 | mask)
        }
    }

    /// Forces the exponent MSB (wire index 1) to zero. The exponent field is
    /// then at most 127, so the value is finite with magnitude below 2.
    pub fn mask_second_bit(self) -> Self {
        Word32(self.0 & !(1u32 << 30))
    }
}

pub fn mask_second_bit(w: Word32) -> Word32 {
    w.mask_second_bit()
}

/// Per-element clip bound applied at the transmitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    threshold: f64,
}

impl ClipConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip threshold must be positive and finite, got {threshold}"
            )));
        }
        Ok(ClipConfig { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { threshold: 1.0 }
    }
}

pub fn check_finite(g: &[f64]) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index, value: g[index] }),
        None => Ok(()),
    }
}

pub fn clip_gradients(g: &[f64], clip: &ClipConfig) -> Result<Vec<f64>> {
    check_finite(g)?;
    let t = clip.threshold;
    Ok(g.iter().map(|&e| e.clamp(-t, t)).collect())
}

/// An ordered bit sequence (one `u8` per bit, values 0/1) made of 32-bit words.
///
/// `interleaver_depth`, `interleave_unit` and `pad_bits` describe the
/// interleaving applied to the frame; they are control information and are
/// assumed to reach the receiver without errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitFrame {
    pub bits: Vec<u8>,
    pub word_count: usize,
    pub interleaver_depth: usize,
    pub interleave_unit: usize,
    pub pad_bits: usize,
}

impl BitFrame {
    pub fn from_words(words: &[Word32]) -> Self {
        let mut bits = Vec::with_capacity(words.len() * WORD_BITS);
        for w in words {
            bits.extend((0..WORD_BITS).map(|i| w.bit(i)));
        }
        BitFrame {
            bits,
            word_count: words.len(),
            interleaver_depth: 1,
            interleave_unit: 1,
            pad_bits: 0,
        }
    }

    /// Wraps raw bits of a non-interleaved frame. The length must be a whole
    /// number of words.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if !bits.len().is_multiple_of(WORD_BITS) {
            return Err(Error::InvalidArgument(format!(
                "frame of {} bits is not a whole number of words",
                bits.len()
            )));
        }
        Ok(BitFrame {
            word_count: bits.len() / WORD_BITS,
            bits,
            interleaver_depth: 1,
            interleave_unit: 1,
            pad_bits: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_interleaved(&self) -> bool {
        self.interleaver_depth > 1 || self.pad_bits > 0
    }

    /// Reads the words back. Only meaningful on a non-interleaved frame.
    pub fn words(&self) -> Vec<Word32> {
        debug_assert!(!self.is_interleaved());
        self.bits
            .chunks_exact(WORD_BITS)
            .take(self.word_count)
            .map(|c| Word32(c.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b & 1))))
            .collect()
    }

    /// Clears wire index 1 of every word, leaving the other bits as received.
    pub fn mask_words(&mut self) {
        debug_assert!(!self.is_interleaved());
        for word in self.bits.chunks_exact_mut(WORD_BITS) {
            word[1] = 0;
        }
    }
}

/// Casts each element to binary32 and lays the words out on the wire.
pub fn encode_gradients(g: &[f64]) -> Result<BitFrame> {
    check_finite(g)?;
    let mut words = Vec::with_capacity(g.len());
    for (index, &v) in g.iter().enumerate() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::NonFinite { index, value: v });
        }
        words.push(Word32::from_f32(single));
    }
    Ok(BitFrame::from_words(&words))
}

pub fn decode_gradients(f: &BitFrame) -> Vec<f64> {
    f.words().into_iter().map(|w| f64::from(w.value())).collect()
}

/// Block interleaver permutation over `units` positions with `depth` rows:
/// unit `r * cols + c` is written to position `c * depth + r`.
fn block_position(i: usize, depth: usize, cols: usize) -> usize {
    let (r, c) = (i / cols, i % cols);
    c * depth + r
}

/// Row-column block interleaver over single bits.
///
/// The frame is zero-padded to a multiple of `depth * 32` bits, written row by
/// row into `depth` rows and read out column by column. Every row holds whole
/// words, so a burst of at most `depth` consecutive channel errors lands in
/// distinct words after deinterleaving.
pub fn interleave(f: &BitFrame, depth: usize) -> Result<BitFrame> {
    interleave_units(f, depth, 1)
}

/// Same permutation as [`interleave`] but moving groups of `unit` bits
/// (one modulation symbol) at a time, so the slot a bit occupies inside its
/// symbol is preserved.
pub fn interleave_units(f: &BitFrame, depth: usize, unit: usize) -> Result<BitFrame> {
    if depth == 0 {
        return Err(Error::InvalidArgument("interleaver depth must be positive".into()));
    }
    if unit == 0 || !WORD_BITS.is_multiple_of(unit) {
        return Err(Error::InvalidArgument(format!(
            "interleave unit {unit} must divide the word size"
        )));
    }
    if f.is_interleaved() {
        return Err(Error::InvalidArgument("frame is already interleaved".into()));
    }
    let block = depth * WORD_BITS;
    let padded = f.bits.len().div_ceil(block) * block;
    let units = padded / unit;
    let cols = units / depth;
    let mut out = vec![0u8; padded];
    for i in 0..f.bits.len() / unit {
        let o = block_position(i, depth, cols);
        out[o * unit..(o + 1) * unit].copy_from_slice(&f.bits[i * unit..(i + 1) * unit]);
    }
    Ok(BitFrame {
        bits: out,
        word_count: f.word_count,
        interleaver_depth: depth,
        interleave_unit: unit,
        pad_bits: padded - f.bits.len(),
    })
}

/// Inverts [`interleave`] / [`interleave_units`] and strips the padding.
pub fn deinterleave(f: &BitFrame) -> Result<BitFrame> {
    let (depth, unit) = (f.interleaver_depth, f.interleave_unit);
    if depth == 0 || unit == 0 {
        return Err(Error::InvalidArgument("interleaver depth must be positive".into()));
    }
    if !f.bits.len().is_multiple_of(depth * WORD_BITS) || f.pad_bits > f.bits.len() {
        return Err(Error::InvalidArgument(format!(
            "interleaved frame of {} bits does not match depth {depth}",
            f.bits.len()
        )));
    }
    let units = f.bits.len() / unit;
    let cols = units / depth;
    let keep = f.bits.len() - f.pad_bits;
    let mut out = vec![0u8; keep];
    for i in 0..keep / unit {
        let o = block_position(i, depth, cols);
        out[i * unit..(i + 1) * unit].copy_from_slice(&f.bits[o * unit..(o + 1) * unit]);
    }
    Ok(BitFrame {
        bits: out,
        word_count: f.word_count,
        interleaver_depth: 1,
        interleave_unit: 1,
        pad_bits: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let c = ClipConfig::default();
        assert_eq!(clip_gradients(&[0.3, -0.7], &c).unwrap(), vec![0.3, -0.7]);
        assert_eq!(clip_gradients(&[2.5, -3.0], &c).unwrap(), vec![1.0, -1.0]);
        let half = ClipConfig::new(0.5).unwrap();
        assert_eq!(clip_gradients(&[0.6, 0.4, -0.9], &half).unwrap(), vec![0.5, 0.4, -0.5]);
    }

    #[test]
    fn clip_rejects_non_finite_with_index() {
        let err = clip_gradients(&[0.0, 1.0, f64::NAN], &ClipConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }), "{err}");
        assert!(ClipConfig::new(0.0).is_err());
        assert!(ClipConfig::new(-1.0).is_err());
    }

    /// Bit-layout oracle: assemble the pattern from sign, biased exponent and
    /// fraction as the binary32 definition describes.
    fn ieee_pattern(sign: u32, exponent: u32, fraction: u32) -> u32 {
        (sign << 31) | (exponent << 23) | fraction
    }

    #[test]
    fn encode_examples() {
        let zero = encode_gradients(&[0.0]).unwrap();
        assert_eq!(zero.bits, vec![0u8; 32]);

        let f = encode_gradients(&[1.5]).unwrap();
        // 1.5 = +1.1b x 2^0: exponent 127, fraction MSB set.
        let expected = ieee_pattern(0, 0b0111_1111, 1 << 22);
        assert_eq!(expected, 0x3FC0_0000);
        assert_eq!(f.words(), vec![Word32(expected)]);
        assert_eq!(&f.bits[..10], &[0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);

        let g = [0.1f32 as f64, -0.25];
        assert_eq!(decode_gradients(&encode_gradients(&g).unwrap()), g.to_vec());
    }

    #[test]
    fn encode_rejects_non_finite_and_overflow() {
        assert!(encode_gradients(&[f64::INFINITY]).is_err());
        assert!(matches!(
            encode_gradients(&[0.0, 1e300]).unwrap_err(),
            Error::NonFinite { index: 1, .. }
        ));
    }

    #[test]
    fn mask_examples() {
        let w = Word32::from_f32(1.5).mask_second_bit();
        assert_eq!(w.value(), 1.5);

        assert_eq!(Word32(0x4000_0000).mask_second_bit(), Word32(0));

        let m = Word32(0xC040_0000).mask_second_bit();
        assert_eq!(m.0, 0x8040_0000);
        // Subnormal: -(fraction / 2^23) * 2^-126 with fraction = 0x400000.
        let expected = -(0x40_0000 as f64 / 2f64.powi(23)) * 2f64.powi(-126);
        assert_eq!(f64::from(m.value()), expected);
        assert!((expected + 5.877e-39).abs() < 1e-42);
    }

    #[test]
    fn mask_frame_clears_only_second_bit() {
        let mut f = encode_gradients(&[-3.0, 0.5]).unwrap();
        let before = f.bits.clone();
        f.mask_words();
        for (i, (a, b)) in before.iter().zip(&f.bits).enumerate() {
            if i % 32 == 1 {
                assert_eq!(*b, 0);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn depth_one_is_identity() {
        let f = encode_gradients(&[0.25, -0.5, 0.125]).unwrap();
        let i = interleave(&f, 1).unwrap();
        assert_eq!(i.bits, f.bits);
        assert_eq!(i.pad_bits, 0);
        assert!(interleave(&f, 0).is_err());
    }

    #[test]
    fn depth_32_two_words_permutation() {
        // Tag each position with a distinct value by using an index frame.
        let f = encode_gradients(&[0.0, 0.0]).unwrap();
        let block = interleave(&f, 32).unwrap();
        assert_eq!(block.len(), 32 * 32);
        assert_eq!(block.pad_bits, 1024 - 64);
        let cols = block.len() / 32;
        // Exhaustive enumeration: every (row, col) lands at col*32 + row and
        // the mapping is a bijection.
        let mut seen = vec![false; block.len()];
        for r in 0..32 {
            for c in 0..cols {
                let o = block_position(r * cols + c, 32, cols);
                assert_eq!(o, c * 32 + r);
                assert!(!seen[o]);
                seen[o] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn burst_hits_distinct_words() {
        let n_words = 64;
        let g: Vec<f64> = (0..n_words).map(|i| i as f64 / 64.0).collect();
        let f = encode_gradients(&g).unwrap();
        let tx = interleave(&f, 32).unwrap();
        // Every starting offset of a 32-long burst.
        for start in 0..=tx.len() - 32 {
            let mut rx = tx.clone();
            for b in &mut rx.bits[start..start + 32] {
                *b ^= 1;
            }
            let back = deinterleave(&rx).unwrap();
            let mut per_word = vec![0usize; n_words];
            for (i, (a, b)) in f.bits.iter().zip(&back.bits).enumerate() {
                if a != b {
                    per_word[i / 32] += 1;
                }
            }
            assert!(per_word.iter().all(|&e| e <= 1), "burst at {start}: {per_word:?}");
        }
        // Frame of exactly 64 words (no padding): 32 words are hit once each.
        let mut rx = tx.clone();
        for b in &mut rx.bits[0..32] {
            *b ^= 1;
        }
        let back = deinterleave(&rx).unwrap();
        let hit = f
            .bits
            .chunks(32)
            .zip(back.bits.chunks(32))
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(hit, 32);
    }

    #[test]
    fn unit_interleave_keeps_slot() {
        let g: Vec<f64> = (0..10).map(|i| i as f64 * 0.01).collect();
        let f = encode_gradients(&g).unwrap();
        let tx = interleave_units(&f, 32, 8).unwrap();
        assert_eq!(deinterleave(&tx).unwrap(), f);
        assert!(interleave_units(&f, 4, 3).is_err());
    }

    proptest! {
        #[test]
        fn mask_bounds_and_idempotent(p in any::<u32>()) {
            let m = Word32(p).mask_second_bit();
            let v = m.value();
            prop_assert!(v.is_finite());
            prop_assert!(v.abs() < 2.0);
            prop_assert_eq!(m.mask_second_bit(), m);
            prop_assert_eq!(m.0 | (1 << 30), p | (1 << 30));
        }

        #[test]
        fn encode_interleave_round_trip(
            g in prop::collection::vec(-1.0e3f64..1.0e3, 0..200),
            depth in 1usize..40,
        ) {
            let f = encode_gradients(&g).unwrap();
            let back = deinterleave(&interleave(&f, depth).unwrap()).unwrap();
            prop_assert_eq!(&back, &f);
            let expected: Vec<f64> = g.iter().map(|&v| f64::from(v as f32)).collect();
            prop_assert_eq!(decode_gradients(&back), expected);
        }

        #[test]
        fn clip_bounds_infinity_norm(
            g in prop::collection::vec(-10.0f64..10.0, 0..100),
            t in 0.01f64..5.0,
        ) {
            let c = clip_gradients(&g, &ClipConfig::new(t).unwrap()).unwrap();
            prop_assert_eq!(c.len(), g.len());
            prop_assert!(c.iter().all(|v| v.abs() <= t));
        }
    }
}
