//! Gray-coded square QAM.
//!
//! A label of `bits_per_symbol` bits is split into an in-phase half (the
//! leading bits) and a quadrature half. Each half is a reflected gray code
//! over the amplitude levels of its axis, with level 0 at the largest positive
//! amplitude, so label 0 sits in the first quadrant and for 16-QAM the
//! all-zero label is a corner point.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const SUPPORTED_ORDERS: [usize; 3] = [4, 16, 256];

#[derive(Debug, Clone)]
pub struct ConstellationMap {
    order: usize,
    bits_per_symbol: usize,
    axis_bits: usize,
    /// Amplitude of each axis level index (unit-energy scaled).
    levels: Vec<f64>,
    /// Level index for each axis gray label.
    level_of_label: Vec<usize>,
    /// Axis gray label for each level index.
    label_of_level: Vec<usize>,
    points: Vec<Complex64>,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

impl ConstellationMap {
    pub fn new(order: usize) -> Result<Self> {
        if !SUPPORTED_ORDERS.contains(&order) {
            return Err(Error::UnsupportedOrder(order));
        }
        let bits_per_symbol = order.trailing_zeros() as usize;
        let axis_bits = bits_per_symbol / 2;
        let per_axis = 1usize << axis_bits;
        // E|s|^2 of the odd-integer lattice is 2(M-1)/3.
        let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt().recip();
        let levels: Vec<f64> = (0..per_axis)
            .map(|j| (per_axis as f64 - 1.0 - 2.0 * j as f64) * scale)
            .collect();
        let label_of_level: Vec<usize> = (0..per_axis).map(gray).collect();
        let mut level_of_label = vec![0; per_axis];
        for (level, &label) in label_of_level.iter().enumerate() {
            level_of_label[label] = level;
        }
        let mask = per_axis - 1;
        let points = (0..order)
            .map(|label| {
                let i_level = level_of_label[label >> axis_bits];
                let q_level = level_of_label[label & mask];
                Complex64::new(levels[i_level], levels[q_level])
            })
            .collect();
        Ok(ConstellationMap {
            order,
            bits_per_symbol,
            axis_bits,
            levels,
            level_of_label,
            label_of_level,
            points,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    /// Levels per axis (√M).
    pub fn side(&self) -> usize {
        self.levels.len()
    }

    /// Grid coordinates `(column, row)` = (in-phase level, quadrature level).
    pub fn grid_position(&self, label: usize) -> (usize, usize) {
        let mask = self.side() - 1;
        (
            self.level_of_label[label >> self.axis_bits],
            self.level_of_label[label & mask],
        )
    }

    pub fn label_at(&self, column: usize, row: usize) -> usize {
        (self.label_of_level[column] << self.axis_bits) | self.label_of_level[row]
    }

    /// Minimum distance between two constellation points.
    pub fn min_distance(&self) -> f64 {
        if self.levels.len() < 2 {
            return 0.0;
        }
        self.levels[0] - self.levels[1]
    }

    /// Label/point table as CSV with a `label,i,q` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,i,q\n");
        for (label, p) in self.points.iter().enumerate() {
            let _ = writeln!(
                out,
                "{label:0width$b},{:.12},{:.12}",
                p.re,
                p.im,
                width = self.bits_per_symbol
            );
        }
        out
    }

    /// Nearest axis level for `metric(a) = gain2 * a^2 - 2 * y * a`, ties to
    /// the lower gray label.
    fn slice_axis(&self, y: f64, gain2: f64) -> usize {
        let mut best_label = 0;
        let mut best = f64::INFINITY;
        for (level, &a) in self.levels.iter().enumerate() {
            let m = gain2 * a * a - 2.0 * y * a;
            let label = self.label_of_level[level];
            if m < best || (m == best && label < best_label) {
                best = m;
                best_label = label;
            }
        }
        best_label
    }

    /// Hard decision for one received sample with known complex gain.
    ///
    /// Minimises `|r - c s|^2` over all points. The metric separates per axis
    /// as `|c|^2 a^2 - 2 Re(conj(c) r) a` (and likewise for the quadrature
    /// part), so each axis is sliced independently. Returns `None` when the
    /// gain is zero.
    pub fn decide(&self, r: Complex64, gain: Complex64) -> Option<usize> {
        let gain2 = gain.norm_sqr();
        if gain2 == 0.0 {
            return None;
        }
        let y = gain.conj() * r;
        let i = self.slice_axis(y.re, gain2);
        let q = self.slice_axis(y.im, gain2);
        Some((i << self.axis_bits) | q)
    }
}

pub fn build_constellation(order: usize) -> Result<ConstellationMap> {
    ConstellationMap::new(order)
}

pub fn modulate(bits: &[u8], map: &ConstellationMap) -> Result<Vec<Complex64>> {
    let k = map.bits_per_symbol;
    if !bits.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} bits is not a multiple of {k} bits per symbol",
            bits.len()
        )));
    }
    Ok(bits
        .chunks_exact(k)
        .map(|chunk| {
            let label = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1));
            map.points[label]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demodulated {
    pub bits: Vec<u8>,
    /// Symbols received with zero channel gain, decoded as label 0.
    pub erased: usize,
}

pub fn demodulate(
    received: &[Complex64],
    gains: &[Complex64],
    map: &ConstellationMap,
) -> Result<Demodulated> {
    if received.len() != gains.len() {
        return Err(Error::ShapeMismatch { expected: received.len(), got: gains.len() });
    }
    let k = map.bits_per_symbol;
    let mut bits = Vec::with_capacity(received.len() * k);
    let mut erased = 0;
    for (&r, &c) in received.iter().zip(gains) {
        let label = map.decide(r, c).unwrap_or_else(|| {
            erased += 1;
            0
        });
        bits.extend((0..k).rev().map(|s| ((label >> s) & 1) as u8));
    }
    Ok(Demodulated { bits, erased })
}

/// Error weight in units of ρ: `axis + diagonal·√2`, kept as integer counts so
/// table entries compare exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RhoWeight {
    pub axis: u32,
    pub diagonal: u32,
}

impl RhoWeight {
    pub fn new(axis: u32, diagonal: u32) -> Self {
        RhoWeight { axis, diagonal }
    }

    pub fn value(self) -> f64 {
        f64::from(self.axis) + f64::from(self.diagonal) * std::f64::consts::SQRT_2
    }

    pub fn count(self) -> u32 {
        self.axis + self.diagonal
    }
}

impl std::ops::AddAssign for RhoWeight {
    fn add_assign(&mut self, o: Self) {
        self.axis += o.axis;
        self.diagonal += o.diagonal;
    }
}

#[derive(Debug, Clone)]
pub struct NeighborErrorTable {
    /// `per_symbol[label][bit]`: flip weight of wire bit `bit` when `label`
    /// is mistaken for one of its axis or diagonal neighbours.
    pub per_symbol: Vec<Vec<RhoWeight>>,
    /// Labels of the neighbour set of each symbol.
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborErrorTable {
    /// Weight of each bit position summed over all symbols.
    pub fn position_totals(&self) -> Vec<RhoWeight> {
        let bits = self.per_symbol.first().map_or(0, Vec::len);
        (0..bits)
            .map(|b| {
                self.per_symbol.iter().fold(RhoWeight::default(), |mut acc, row| {
                    acc += row[b];
                    acc
                })
            })
            .collect()
    }
}

/// Enumerates, for every symbol, the neighbours at minimum distance (weight
/// ρ) and at √2 times the minimum distance (weight √2ρ) and accumulates which
/// bit positions each confusion flips.
pub fn neighbor_error_table(map: &ConstellationMap) -> NeighborErrorTable {
    let side = map.side() as isize;
    let k = map.bits_per_symbol;
    let mut per_symbol = vec![vec![RhoWeight::default(); k]; map.order];
    let mut neighbors = vec![Vec::new(); map.order];
    for label in 0..map.order {
        let (col, row) = map.grid_position(label);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (c, r) = (col as isize + dc, row as isize + dr);
                if c < 0 || r < 0 || c >= side || r >= side {
                    continue;
                }
                let other = map.label_at(c as usize, r as usize);
                neighbors[label].push(other);
                let w = if dr == 0 || dc == 0 { RhoWeight::new(1, 0) } else { RhoWeight::new(0, 1) };
                let flipped = label ^ other;
                for (bit, slot) in per_symbol[label].iter_mut().enumerate() {
                    if (flipped >> (k - 1 - bit)) & 1 == 1 {
                        *slot += w;
                    }
                }
            }
        }
        neighbors[label].sort_unstable();
    }
    NeighborErrorTable { per_symbol, neighbors }
}

/// Bit positions of a symbol ordered from most to least reliable (ascending
/// total neighbour error weight, ties by position).
pub fn bit_reliability_order(map: &ConstellationMap) -> Vec<usize> {
    let totals = neighbor_error_table(map).position_totals();
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(|&a, &b| {
        let (wa, wb) = (totals[a], totals[b]);
        let by_value = if wa == wb { std::cmp::Ordering::Equal } else { wa.value().total_cmp(&wb.value()) };
        by_value.then(a.cmp(&b))
    });
    order
}
