//! Hexagonal Fourier summary of a ratemap: period, orientation and the
//! three lattice phases.
//!
//! The map is mean-subtracted, Hann-windowed and zero-padded. The strongest
//! spectral peak seeds a search over the wavevector triple `(|k|, θ)` that
//! maximizes the summed power at `k₁, k₂, k₃`, evaluated with the exact
//! discrete-space Fourier transform so the estimate is not tied to the FFT
//! grid. Phases follow the convention of [`crate::gridcode`]: a field
//! `ReLU(Σₐ cos(kₐ·x + φᵃ))` reports `φᵃ`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;

use super::autocorr::{autocorrelogram, grid_score, GridScore};
use super::fft::Fft2;
use super::ratemap::Ratemap;
use crate::trajectory::Vec2;

/// Smallest ratio of the weakest to the strongest power in the triple.
pub const MIN_BALANCE: f64 = 0.2;
/// Smallest ratio of the mean triple power to the median in-band power.
pub const MIN_CONTRAST: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HexSpectrum {
    /// Lattice period `4π/(√3|k|)` in meters.
    pub period: f64,
    /// Angle of `k₁` reduced to `[0, 60°)`, in radians.
    pub orientation: f64,
    pub wavevectors: [Vec2; 3],
    /// `φ¹, φ², φ³` in `[0, 2π)`, projected so their sum is `0 mod 2π`.
    pub phases: [f64; 3],
    /// Wrapped `φ¹ + φ² + φ³` before projection.
    pub closure_residual: f64,
    pub powers: [f64; 3],
    pub balance: f64,
    pub contrast: f64,
}

impl HexSpectrum {
    pub fn is_hexagonal(&self) -> bool {
        self.balance >= MIN_BALANCE && self.contrast >= MIN_CONTRAST
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitSpectralSummary {
    pub unit: usize,
    pub dead: bool,
    pub grid_score: Option<GridScore>,
    pub spectrum: Option<HexSpectrum>,
}

impl UnitSpectralSummary {
    /// Live unit with a dominant hexagonal wavevector triple.
    pub fn is_classified(&self) -> bool {
        !self.dead && self.spectrum.is_some_and(|s| s.is_hexagonal())
    }
}

/// Windowed, mean-subtracted map with its bin-center coordinates.
struct Prepared {
    w: usize,
    h: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
}

fn hann(i: usize, n: usize) -> f64 {
    0.5 - 0.5 * (TAU * (i as f64 + 0.5) / n as f64).cos()
}

fn prepare(map: &Ratemap) -> Option<Prepared> {
    let valid: Vec<f64> = map.values.iter().copied().filter(|v| v.is_finite()).collect();
    if valid.is_empty() {
        return None;
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let (w, h) = (map.bins_x, map.bins_y);
    let mut values = vec![0.0; w * h];
    for iy in 0..h {
        for ix in 0..w {
            let v = map.get(ix, iy);
            if v.is_finite() {
                values[iy * w + ix] = (v - mean) * hann(ix, w) * hann(iy, h);
            }
        }
    }
    let xs = (0..w).map(|i| map.bin_center(i, 0)[0]).collect();
    let ys = (0..h).map(|i| map.bin_center(0, i)[1]).collect();
    Some(Prepared { w, h, xs, ys, values })
}

impl Prepared {
    /// `Σ r(x) e^{−ik·x}` over bin centers.
    fn dtft(&self, k: Vec2) -> Complex64 {
        let ex: Vec<Complex64> = self.xs.iter().map(|&x| Complex64::from_polar(1.0, -k[0] * x)).collect();
        let mut total = Complex64::default();
        for iy in 0..self.h {
            let row = &self.values[iy * self.w..(iy + 1) * self.w];
            let s: Complex64 = row.iter().zip(&ex).map(|(&v, e)| e * v).sum();
            total += s * Complex64::from_polar(1.0, -k[1] * self.ys[iy]);
        }
        total
    }

    fn triple_power(&self, kappa: f64, theta: f64) -> f64 {
        triple(kappa, theta).iter().map(|&k| self.dtft(k).norm_sqr()).sum()
    }
}

fn triple(kappa: f64, theta: f64) -> [Vec2; 3] {
    std::array::from_fn(|a| {
        let ang = theta + a as f64 * TAU / 3.0;
        [kappa * ang.cos(), kappa * ang.sin()]
    })
}

fn wrap(p: f64) -> f64 {
    let r = p.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Dominant hexagonal wavevector triple of `map`. `None` when the map has no
/// valid bins or no in-band spectral power.
pub fn hex_spectrum(map: &Ratemap) -> Option<HexSpectrum> {
    let prep = prepare(map)?;
    let (w, h) = (prep.w, prep.h);
    let p = (4 * w.max(h)).next_power_of_two();
    let fft = Fft2::new(p, p);
    let mut spec = fft.embed(&prep.values, w, h);
    fft.process(&mut spec, false);

    let dk = TAU / (p as f64 * map.bin_size);
    let lo = TAU * 2.0 / map.arena.width().min(map.arena.height());
    let hi = TAU / (3.0 * map.bin_size);
    let mut band = Vec::new();
    let mut best = (0.0, [0.0, 0.0]);
    let half = p as isize / 2;
    for v in 0..=half {
        for u in -half + 1..=half {
            let k = [u as f64 * dk, v as f64 * dk];
            let kn = k[0].hypot(k[1]);
            if kn < lo || kn > hi || (v == 0 && u < 0) {
                continue;
            }
            let pw = spec[v as usize * p + u.rem_euclid(p as isize) as usize].norm_sqr();
            band.push(pw);
            if pw > best.0 {
                best = (pw, k);
            }
        }
    }
    if !(best.0 > 0.0) {
        return None;
    }
    band.sort_by(f64::total_cmp);
    let median = band[band.len() / 2];

    let mut kappa = best.1[0].hypot(best.1[1]);
    let mut theta = best.1[1].atan2(best.1[0]);
    let mut j = prep.triple_power(kappa, theta);
    let (mut sk, mut st) = (dk, dk / kappa);
    for _ in 0..400 {
        let mut moved = false;
        for (ck, ct) in [(kappa + sk, theta), (kappa - sk, theta), (kappa, theta + st), (kappa, theta - st)] {
            let cj = prep.triple_power(ck, ct);
            if cj > j {
                (kappa, theta, j) = (ck, ct, cj);
                moved = true;
            }
        }
        if !moved {
            sk *= 0.5;
            st *= 0.5;
            if sk < 1e-10 * kappa {
                break;
            }
        }
    }

    let orientation = theta.rem_euclid(PI / 3.0);
    let wavevectors = triple(kappa, orientation);
    let coeffs: [Complex64; 3] = std::array::from_fn(|a| prep.dtft(wavevectors[a]));
    let powers: [f64; 3] = std::array::from_fn(|a| coeffs[a].norm_sqr());
    let raw: [f64; 3] = std::array::from_fn(|a| coeffs[a].arg());
    let closure_residual = wrap(raw.iter().sum());
    let phases = raw.map(|f| (f - closure_residual / 3.0).rem_euclid(TAU));
    let (pmin, pmax) = (powers.iter().copied().fold(f64::INFINITY, f64::min), powers.iter().copied().fold(0.0, f64::max));
    let balance = if pmax > 0.0 { pmin / pmax } else { 0.0 };
    let contrast = if median > 0.0 { powers.iter().sum::<f64>() / 3.0 / median } else { f64::INFINITY };
    Some(HexSpectrum {
        period: 4.0 * PI / (3f64.sqrt() * kappa),
        orientation,
        wavevectors,
        phases,
        closure_residual,
        powers,
        balance,
        contrast,
    })
}

/// Dead flag, gridness and hexagonal spectrum of one unit.
pub fn fourier_summary(map: &Ratemap) -> UnitSpectralSummary {
    let dead = map.is_dead();
    if dead {
        return UnitSpectralSummary { unit: map.unit, dead, grid_score: None, spectrum: None };
    }
    let grid_score = autocorrelogram(map).ok().and_then(|ac| grid_score(&ac));
    UnitSpectralSummary { unit: map.unit, dead, grid_score, spectrum: hex_spectrum(map) }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gridcode::IdealModule;
    use crate::trajectory::Arena;

    fn map_of(arena: Arena, bin: f64, mut f: impl FnMut(Vec2) -> f64) -> Ratemap {
        let n = (arena.width() / bin).round() as usize;
        let mut map = Ratemap {
            unit: 0,
            arena,
            bin_size: bin,
            bins_x: n,
            bins_y: n,
            values: vec![0.0; n * n],
            occupancy: vec![50; n * n],
            peak: 0.0,
        };
        for iy in 0..n {
            for ix in 0..n {
                let v = f(map.bin_center(ix, iy));
                map.values[iy * n + ix] = v;
                map.peak = map.peak.max(v);
            }
        }
        map
    }

    fn oracle(period: f64, theta_deg: f64, phase: [f64; 2], arena: Arena, bin: f64) -> (IdealModule, Ratemap) {
        let m = IdealModule::new(period, theta_deg.to_radians(), vec![phase], 1.0).unwrap();
        let map = map_of(arena, bin, |x| {
            let mut r = [0.0];
            m.rates_into(x, &mut r);
            r[0]
        });
        (m, map)
    }

    fn angle_diff(a: f64, b: f64, modulus: f64) -> f64 {
        let d = (a - b).rem_euclid(modulus);
        d.min(modulus - d)
    }

    #[test]
    fn oracle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..12 {
            let period = rng.gen_range(0.25..0.7);
            let theta = rng.gen_range(0.0..60.0);
            let phase = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
            let (m, map) = oracle(period, theta, phase, Arena::square(2.0), 0.02);
            let s = hex_spectrum(&map).unwrap();
            assert!(s.is_hexagonal(), "{s:?}");
            assert!((s.period - period).abs() < 0.05 * period, "{} vs {period}", s.period);
            assert!(angle_diff(s.orientation, theta.to_radians(), PI / 3.0) < 2f64.to_radians());
            let want = m.phase_triple(0);
            for a in 0..3 {
                assert!(angle_diff(s.phases[a], want[a], TAU) < 0.2, "{:?} vs {want:?}", s.phases);
            }
            assert!(wrap(s.phases.iter().sum()).abs() < 1e-6);
            assert!(s.closure_residual.abs() < 0.2);
        }
    }

    #[test]
    fn translation_shifts_phases() {
        let (m, base) = oracle(0.4, 7.5, [0.3, 1.1], Arena::square(2.0), 0.02);
        let shift = [0.071, -0.043];
        let moved = map_of(Arena::square(2.0), 0.02, |x| {
            let mut r = [0.0];
            m.rates_into([x[0] - shift[0], x[1] - shift[1]], &mut r);
            r[0]
        });
        let (a, b) = (hex_spectrum(&base).unwrap(), hex_spectrum(&moved).unwrap());
        assert!((a.period - b.period).abs() < 1e-3 * a.period);
        assert!(angle_diff(a.orientation, b.orientation, PI / 3.0) < 1e-3);
        for k in 0..3 {
            let kx = a.wavevectors[k][0] * shift[0] + a.wavevectors[k][1] * shift[1];
            assert!(angle_diff(b.phases[k], a.phases[k] - kx, TAU) < 0.05);
        }
    }

    #[test]
    fn arena_size_does_not_bias_period() {
        let (_, small) = oracle(0.45, 20.0, [0.0, 0.0], Arena::square(2.0), 0.02);
        let (_, large) = oracle(0.45, 20.0, [0.0, 0.0], Arena::square(4.0), 0.04);
        let (a, b) = (hex_spectrum(&small).unwrap().period, hex_spectrum(&large).unwrap().period);
        assert!((a - b).abs() < 0.05 * a, "{a} vs {b}");
    }

    #[test]
    fn stripes_and_noise_are_not_hexagonal() {
        let k = TAU / 0.4;
        let stripes = map_of(Arena::square(2.0), 0.02, |x| (k * x[0]).cos().max(0.0));
        assert!(!hex_spectrum(&stripes).unwrap().is_hexagonal());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = map_of(Arena::square(2.0), 0.02, |_| rng.gen::<f64>());
        assert!(!hex_spectrum(&noise).unwrap().is_hexagonal());
    }

    #[test]
    fn dead_unit_summary() {
        let map = map_of(Arena::square(1.0), 0.05, |_| 0.0);
        let s = fourier_summary(&map);
        assert!(s.dead && !s.is_classified() && s.grid_score.is_none());
    }
}
