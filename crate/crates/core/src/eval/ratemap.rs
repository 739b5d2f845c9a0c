//! Occupancy-normalized ratemaps and their binary file format.

use std::io::{Read, Write};

use crate::io::{read_f64, read_f64s, read_magic, read_u32, read_u32s, write_f64s, write_u32s, BinaryError};
use crate::trajectory::{Arena, Vec2};

const MAGIC: &[u8; 4] = b"GSRM";
const VERSION: u32 = 1;

/// Activations below this peak over the whole trajectory mark a dead unit.
pub const DEAD_THRESHOLD: f64 = 1e-6;

/// Mean activation of one unit per spatial bin. Bins visited fewer than
/// the minimum number of times hold `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ratemap {
    pub unit: usize,
    pub arena: Arena,
    pub bin_size: f64,
    pub bins_x: usize,
    pub bins_y: usize,
    /// Row-major, `y` major: bin `(ix, iy)` is at `iy * bins_x + ix`.
    pub values: Vec<f64>,
    pub occupancy: Vec<u32>,
    /// Largest activation seen anywhere along the trajectory.
    pub peak: f64,
}

impl Ratemap {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.bins_x + ix]
    }

    pub fn is_valid(&self, ix: usize, iy: usize) -> bool {
        self.get(ix, iy).is_finite()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.values.iter().filter(|v| v.is_finite()).count() as f64 / self.values.len() as f64
    }

    pub fn is_dead(&self) -> bool {
        self.peak < DEAD_THRESHOLD
    }

    /// Center of bin `(ix, iy)`.
    pub fn bin_center(&self, ix: usize, iy: usize) -> Vec2 {
        [self.arena.x0 + (ix as f64 + 0.5) * self.bin_size, self.arena.y0 + (iy as f64 + 0.5) * self.bin_size]
    }

    /// Header, `f64` values and `u32` occupancy, all little-endian.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), BinaryError> {
        w.write_all(MAGIC)?;
        for x in [VERSION, self.unit as u32, self.bins_x as u32, self.bins_y as u32] {
            w.write_all(&x.to_le_bytes())?;
        }
        let a = &self.arena;
        write_f64s(&mut w, &[self.bin_size, a.x0, a.y0, a.x1, a.y1])?;
        write_f64s(&mut w, &self.values)?;
        write_u32s(&mut w, &self.occupancy)?;
        Ok(())
    }

    /// Reads a map written by [`Self::write`]. The peak is not stored and is
    /// recovered as the largest valid bin value.
    pub fn read<R: Read>(mut r: R) -> Result<Self, BinaryError> {
        read_magic(&mut r, MAGIC)?;
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(BinaryError::Version { found: version, expected: VERSION });
        }
        let unit = read_u32(&mut r)? as usize;
        let bins_x = read_u32(&mut r)? as usize;
        let bins_y = read_u32(&mut r)? as usize;
        let bin_size = read_f64(&mut r)?;
        let c = read_f64s(&mut r, 4)?;
        if !(bin_size > 0.0) || bins_x == 0 || bins_y == 0 {
            return Err(BinaryError::Malformed("empty ratemap grid".into()));
        }
        let values = read_f64s(&mut r, bins_x * bins_y)?;
        let occupancy = read_u32s(&mut r, bins_x * bins_y)?;
        let peak = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        Ok(Ratemap { unit, arena: Arena { x0: c[0], y0: c[1], x1: c[2], y1: c[3] }, bin_size, bins_x, bins_y, values, occupancy, peak })
    }
}

/// Streams `(position, activations)` samples into per-unit bin sums.
#[derive(Clone, Debug)]
pub struct RatemapAccumulator {
    arena: Arena,
    bin_size: f64,
    bins_x: usize,
    bins_y: usize,
    units: usize,
    /// Bin-major: `sums[bin * units + unit]`.
    sums: Vec<f64>,
    counts: Vec<u32>,
    peaks: Vec<f64>,
}

impl RatemapAccumulator {
    pub fn new(arena: Arena, bin_size: f64, units: usize) -> Self {
        assert!(bin_size > 0.0, "bin size must be positive");
        let bins = |len: f64| ((len / bin_size - 1e-9).ceil() as usize).max(1);
        let (bins_x, bins_y) = (bins(arena.width()), bins(arena.height()));
        RatemapAccumulator {
            arena,
            bin_size,
            bins_x,
            bins_y,
            units,
            sums: vec![0.0; bins_x * bins_y * units],
            counts: vec![0; bins_x * bins_y],
            peaks: vec![f64::NEG_INFINITY; units],
        }
    }

    pub fn bins(&self) -> (usize, usize) {
        (self.bins_x, self.bins_y)
    }

    /// Bin containing `p`; positions outside the arena are ignored.
    pub fn bin_of(&self, p: Vec2) -> Option<usize> {
        if !self.arena.contains(p) {
            return None;
        }
        let ix = (((p[0] - self.arena.x0) / self.bin_size) as usize).min(self.bins_x - 1);
        let iy = (((p[1] - self.arena.y0) / self.bin_size) as usize).min(self.bins_y - 1);
        Some(iy * self.bins_x + ix)
    }

    pub fn add(&mut self, p: Vec2, activations: &[f64]) {
        assert_eq!(activations.len(), self.units, "activation length must equal the unit count");
        for (pk, &a) in self.peaks.iter_mut().zip(activations) {
            *pk = pk.max(a);
        }
        if let Some(bin) = self.bin_of(p) {
            self.counts[bin] += 1;
            let row = &mut self.sums[bin * self.units..(bin + 1) * self.units];
            for (s, &a) in row.iter_mut().zip(activations) {
                *s += a;
            }
        }
    }

    /// One map per unit; bins with fewer than `min_occupancy` visits are `NaN`.
    pub fn finish(&self, min_occupancy: u32) -> Vec<Ratemap> {
        (0..self.units)
            .map(|u| {
                let values = self
                    .counts
                    .iter()
                    .enumerate()
                    .map(|(bin, &c)| if c >= min_occupancy.max(1) { self.sums[bin * self.units + u] / c as f64 } else { f64::NAN })
                    .collect();
                Ratemap {
                    unit: u,
                    arena: self.arena,
                    bin_size: self.bin_size,
                    bins_x: self.bins_x,
                    bins_y: self.bins_y,
                    values,
                    occupancy: self.counts.clone(),
                    peak: self.peaks[u].max(0.0),
                }
            })
            .collect()
    }
}
