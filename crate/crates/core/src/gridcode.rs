//! Idealized grid codes used as ground truth for the analysis pipeline.
//!
//! A module is a hexagonal lattice of period `λ` (distance between
//! neighboring firing fields) and orientation `θ` (angle of the first
//! wavevector). Its three wavevectors `k₁, k₂, k₃` have length
//! `4π/(√3λ)`, sit at 120° from each other and sum to zero. Each cell has a
//! 2-D phase `(φ¹, φ²)` on the lattice torus with `φ³ = −φ¹ − φ²`, and fires
//! at `R_max·ReLU(Σₐ cos(kₐ·x + φᵃ))/3`, which peaks at `R_max`.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::eval::Ratemap;
use crate::trajectory::{Arena, Vec2};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GridCodeError {
    #[error("module period must be positive and finite, got {0}")]
    Period(f64),
    #[error("module peak rate must be positive and finite, got {0}")]
    PeakRate(f64),
    #[error("module has no cells")]
    NoCells,
    #[error("code has no modules")]
    NoModules,
    #[error("modules {0} and {1} share the period {2}")]
    DuplicatePeriod(usize, usize, f64),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdealModule {
    period: f64,
    orientation: f64,
    phases: Vec<[f64; 2]>,
    r_max: f64,
}

impl IdealModule {
    pub fn new(period: f64, orientation: f64, phases: Vec<[f64; 2]>, r_max: f64) -> Result<Self, GridCodeError> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(GridCodeError::Period(period));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(GridCodeError::PeakRate(r_max));
        }
        if phases.is_empty() {
            return Err(GridCodeError::NoCells);
        }
        let phases = phases.into_iter().map(|[a, b]| [a.rem_euclid(TAU), b.rem_euclid(TAU)]).collect();
        Ok(IdealModule { period, orientation, phases, r_max })
    }

    /// `side × side` cells whose phases tile the torus on a regular grid.
    pub fn uniform(period: f64, orientation: f64, side: usize, r_max: f64) -> Result<Self, GridCodeError> {
        let step = TAU / side as f64;
        let phases = (0..side).flat_map(|i| (0..side).map(move |j| [i as f64 * step, j as f64 * step])).collect();
        IdealModule::new(period, orientation, phases, r_max)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    pub fn phases(&self) -> &[[f64; 2]] {
        &self.phases
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn cells(&self) -> usize {
        self.phases.len()
    }

    /// `|kₐ| = 4π/(√3λ)`.
    pub fn wavenumber(&self) -> f64 {
        4.0 * PI / (3f64.sqrt() * self.period)
    }

    /// `k₁, k₂, k₃` at angles `θ, θ+120°, θ+240°`.
    pub fn wavevectors(&self) -> [Vec2; 3] {
        let k = self.wavenumber();
        std::array::from_fn(|a| {
            let ang = self.orientation + a as f64 * TAU / 3.0;
            [k * ang.cos(), k * ang.sin()]
        })
    }

    /// Lattice vectors `a₁, a₂` dual to `k₁, k₂`: `kᵢ·aⱼ = 2π δᵢⱼ`.
    pub fn lattice_vectors(&self) -> [Vec2; 2] {
        let [k1, k2, _] = self.wavevectors();
        let det = k1[0] * k2[1] - k1[1] * k2[0];
        let s = TAU / det;
        [[s * k2[1], -s * k2[0]], [-s * k1[1], s * k1[0]]]
    }

    /// The three phases `(φ¹, φ², −φ¹−φ²)` of one cell.
    pub fn phase_triple(&self, cell: usize) -> [f64; 3] {
        let [a, b] = self.phases[cell];
        [a, b, (-a - b).rem_euclid(TAU)]
    }

    /// Writes the rate of every cell at `x` into `out`.
    pub fn rates_into(&self, x: Vec2, out: &mut [f64]) {
        assert_eq!(out.len(), self.cells(), "output length must equal the cell count");
        let [p1, p2] = self.projections(x);
        let scale = self.r_max / 3.0;
        for (o, &[f1, f2]) in out.iter_mut().zip(&self.phases) {
            let (a, b) = (p1 + f1, p2 + f2);
            *o = scale * (a.cos() + b.cos() + (a + b).cos()).max(0.0);
        }
    }

    fn projections(&self, x: Vec2) -> Vec2 {
        let [k1, k2, _] = self.wavevectors();
        [k1[0] * x[0] + k1[1] * x[1], k2[0] * x[0] + k2[1] * x[1]]
    }
}

/// `R_max·ReLU(cos(2πx/λ + φᵢ))` per cell, using the first phase component.
pub fn rate_1d(module: &IdealModule, x: f64) -> Vec<f64> {
    let arg = TAU * x / module.period;
    module.phases.iter().map(|p| module.r_max * (arg + p[0]).cos().max(0.0)).collect()
}

/// Hexagonal rates of every cell of `module` at `x`.
pub fn rate_2d_hex(module: &IdealModule, x: Vec2) -> Vec<f64> {
    let mut out = vec![0.0; module.cells()];
    module.rates_into(x, &mut out);
    out
}

/// Position reduced modulo the lattice: `(k₁·x, k₂·x) mod 2π`.
pub fn phase_of_position(module: &IdealModule, x: Vec2) -> [f64; 2] {
    let [a, b] = module.projections(x);
    [a.rem_euclid(TAU), b.rem_euclid(TAU)]
}

/// A population of modules. States are the concatenated rates, scaled to unit norm.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdealCode {
    modules: Vec<IdealModule>,
}

impl IdealCode {
    pub fn new(modules: Vec<IdealModule>) -> Result<Self, GridCodeError> {
        if modules.is_empty() {
            return Err(GridCodeError::NoModules);
        }
        for i in 0..modules.len() {
            for j in i + 1..modules.len() {
                if modules[i].period == modules[j].period {
                    return Err(GridCodeError::DuplicatePeriod(i, j, modules[i].period));
                }
            }
        }
        Ok(IdealCode { modules })
    }

    /// One module: `λ = 0.4 m`, `θ = 7.5°`, 64 cells on an 8×8 phase grid.
    pub fn default_oracle() -> Self {
        IdealCode::new(vec![IdealModule::uniform(0.4, 7.5f64.to_radians(), 8, 1.0).unwrap()]).unwrap()
    }

    /// Two modules of 64 cells each: `λ = 0.30 m` at 7.5° and `λ = 0.45 m` at 20°.
    pub fn two_module_oracle() -> Self {
        IdealCode::new(vec![
            IdealModule::uniform(0.30, 7.5f64.to_radians(), 8, 1.0).unwrap(),
            IdealModule::uniform(0.45, 20f64.to_radians(), 8, 1.0).unwrap(),
        ])
        .unwrap()
    }

    pub fn modules(&self) -> &[IdealModule] {
        &self.modules
    }

    pub fn units(&self) -> usize {
        self.modules.iter().map(IdealModule::cells).sum()
    }

    /// Module index of every unit, in state order.
    pub fn module_labels(&self) -> Vec<usize> {
        self.modules.iter().enumerate().flat_map(|(m, module)| std::iter::repeat(m).take(module.cells())).collect()
    }

    /// Smallest module period.
    pub fn min_period(&self) -> f64 {
        self.modules.iter().map(IdealModule::period).fold(f64::INFINITY, f64::min)
    }

    /// Code restricted to its first `count` modules.
    pub fn prefix(&self, count: usize) -> Result<Self, GridCodeError> {
        IdealCode::new(self.modules[..count.min(self.modules.len())].to_vec())
    }

    /// Unnormalized rates of all units at `x`.
    pub fn rates_into(&self, x: Vec2, out: &mut [f64]) {
        assert_eq!(out.len(), self.units(), "output length must equal the unit count");
        let mut off = 0;
        for m in &self.modules {
            m.rates_into(x, &mut out[off..off + m.cells()]);
            off += m.cells();
        }
    }

    /// Unit-norm state at `x`; all-zero rates stay zero.
    pub fn state_into(&self, x: Vec2, out: &mut [f64]) {
        self.rates_into(x, out);
        let n = out.iter().map(|r| r * r).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|r| *r /= n);
        }
    }

    pub fn state(&self, x: Vec2) -> Vec<f64> {
        let mut out = vec![0.0; self.units()];
        self.state_into(x, &mut out);
        out
    }

    /// Exact rates at every bin center, as ratemaps with unit occupancy.
    pub fn analytic_ratemaps(&self, arena: Arena, bin_size: f64) -> Vec<Ratemap> {
        let bx = ((arena.width() / bin_size).round() as usize).max(1);
        let by = ((arena.height() / bin_size).round() as usize).max(1);
        let n = self.units();
        let mut values = vec![vec![0.0; bx * by]; n];
        let mut rates = vec![0.0; n];
        for iy in 0..by {
            for ix in 0..bx {
                let x = [arena.x0 + (ix as f64 + 0.5) * bin_size, arena.y0 + (iy as f64 + 0.5) * bin_size];
                self.rates_into(x, &mut rates);
                for (u, &r) in rates.iter().enumerate() {
                    values[u][iy * bx + ix] = r;
                }
            }
        }
        values
            .into_iter()
            .enumerate()
            .map(|(unit, values)| Ratemap {
                unit,
                arena,
                bin_size,
                bins_x: bx,
                bins_y: by,
                peak: values.iter().copied().fold(0.0, f64::max),
                occupancy: vec![1; bx * by],
                values,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsConfig {
    /// Spatial resolution of a codeword, in meters.
    pub resolution: f64,
    /// Separations probed by the distance curve, as multiples of the smallest period.
    pub max_separation: f64,
    pub separation_bins: usize,
    pub pairs_per_bin: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { resolution: 0.05, max_separation: 3.0, separation_bins: 60, pairs_per_bin: 2000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub separation: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodingReport {
    /// `(modules used, distinguishable states)` for each prefix of the code.
    pub distinguishable: Vec<(usize, usize)>,
    pub distance_curve: Vec<CurvePoint>,
    pub min_norm: f64,
    pub max_norm: f64,
}

/// Codewords distinguishable at spatial resolution `resolution` inside `arena`.
///
/// Each module's phase is quantized into `round(λ/resolution)` bins per
/// lattice axis and codewords are the distinct joint bin tuples reached by
/// positions on a grid four times finer than `resolution`.
pub fn distinguishable_states(code: &IdealCode, arena: &Arena, resolution: f64) -> usize {
    assert!(resolution > 0.0, "resolution must be positive");
    let bins: Vec<usize> = code.modules.iter().map(|m| ((m.period / resolution).round() as usize).max(1)).collect();
    let h = resolution / 4.0;
    let nx = (arena.width() / h).floor() as usize + 1;
    let ny = (arena.height() / h).floor() as usize + 1;
    let mut seen = HashSet::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let x = [arena.x0 + ix as f64 * h, arena.y0 + iy as f64 * h];
            let word: Vec<(usize, usize)> = code
                .modules
                .iter()
                .zip(&bins)
                .map(|(m, &q)| {
                    let [a, b] = phase_of_position(m, x);
                    let cell = |p: f64| ((p / TAU * q as f64) as usize).min(q - 1);
                    (cell(a), cell(b))
                })
                .collect();
            seen.insert(word);
        }
    }
    seen.len()
}

/// Mean and standard deviation of `‖g(x) − g(x + d·u)‖` over random `x` in
/// `arena` and random unit directions `u`, at separation `d`.
pub fn distance_at<R: Rng + ?Sized>(code: &IdealCode, arena: &Arena, separation: f64, pairs: usize, rng: &mut R) -> CurvePoint {
    let n = code.units();
    let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
    let mut ds = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let x = [rng.gen_range(arena.x0..=arena.x1), rng.gen_range(arena.y0..=arena.y1)];
        let ang: f64 = rng.gen_range(0.0..TAU);
        code.state_into(x, &mut a);
        code.state_into([x[0] + separation * ang.cos(), x[1] + separation * ang.sin()], &mut b);
        ds.push(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
    }
    let mean = ds.iter().sum::<f64>() / pairs.max(1) as f64;
    let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / pairs.max(1) as f64;
    CurvePoint { separation, mean, std: var.sqrt(), count: pairs }
}

/// Capacity, decorrelation and equinorm diagnostics of an ideal code.
pub fn coding_diagnostics(code: &IdealCode, arena: &Arena, config: &DiagnosticsConfig) -> CodingReport {
    use rand::SeedableRng;

    let distinguishable =
        (1..=code.modules.len()).map(|m| (m, distinguishable_states(&code.prefix(m).unwrap(), arena, config.resolution))).collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let top = config.max_separation * code.min_period();
    let bins = config.separation_bins.max(1);
    let distance_curve = (0..bins)
        .map(|i| {
            let d = top * (i as f64 + 0.5) / bins as f64;
            distance_at(code, arena, d, config.pairs_per_bin, &mut rng)
        })
        .collect();

    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let h = config.resolution;
    let mut g = vec![0.0; code.units()];
    let mut y = arena.y0;
    while y <= arena.y1 {
        let mut x = arena.x0;
        while x <= arena.x1 {
            code.state_into([x, y], &mut g);
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            lo = lo.min(n);
            hi = hi.max(n);
            x += h;
        }
        y += h;
    }
    CodingReport { distinguishable, distance_curve, min_norm: lo, max_norm: hi }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn module() -> IdealModule {
        IdealModule::uniform(0.4, 7.5f64.to_radians(), 8, 2.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn phase_close(a: f64, b: f64, tol: f64) -> bool {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d) <= tol
    }

    #[test]
    fn rate_1d_examples() {
        let m = IdealModule::new(0.4, 0.0, vec![[0.0, 0.0], [1.0, 0.0]], 3.0).unwrap();
        assert_eq!(rate_1d(&m, 0.0)[0], 3.0);
        assert!(rate_1d(&m, 0.2)[0].abs() < 1e-15);
        for &x in &[0.0, 0.13, -0.71, 2.9] {
            let (a, b) = (rate_1d(&m, x), rate_1d(&m, x + 0.4));
            for (p, q) in a.iter().zip(&b) {
                assert!(close(*p, *q, 1e-12), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn wavevectors_close_and_lattice_is_dual() {
        let m = module();
        let k = m.wavevectors();
        assert!(close(k[0][0] + k[1][0] + k[2][0], 0.0, 1e-12) && close(k[0][1] + k[1][1] + k[2][1], 0.0, 1e-12));
        let a = m.lattice_vectors();
        for (i, ki) in k[..2].iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                let want = if i == j { TAU } else { 0.0 };
                assert!(close(ki[0] * aj[0] + ki[1] * aj[1], want, 1e-12));
            }
        }
        for aj in a {
            assert!(close(aj[0].hypot(aj[1]), 0.4, 1e-12));
        }
    }

    #[test]
    fn peak_at_lattice_vertex() {
        let m = IdealModule::new(0.4, 0.3, vec![[0.0, 0.0]], 2.0).unwrap();
        let [a1, a2] = m.lattice_vectors();
        for x in [[0.0, 0.0], a1, a2, [a1[0] - 2.0 * a2[0], a1[1] - 2.0 * a2[1]]] {
            assert!(close(rate_2d_hex(&m, x)[0], 2.0, 1e-12));
        }
    }

    #[test]
    fn fields_are_lattice_periodic() {
        let m = module();
        let [a1, a2] = m.lattice_vectors();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let r = rate_2d_hex(&m, x);
            for a in [a1, a2] {
                let s = rate_2d_hex(&m, [x[0] + a[0], x[1] + a[1]]);
                for (p, q) in r.iter().zip(&s) {
                    assert!(close(*p, *q, 1e-12));
                }
            }
        }
    }

    #[test]
    fn phase_examples() {
        let m = module();
        let [a1, a2] = m.lattice_vectors();
        let z = phase_of_position(&m, [0.0, 0.0]);
        assert_eq!(z, [0.0, 0.0]);
        for p in phase_of_position(&m, a1).into_iter().chain(phase_of_position(&m, a2)) {
            assert!(phase_close(p, 0.0, 1e-12));
        }
        let h = phase_of_position(&m, [a1[0] / 2.0, a1[1] / 2.0]);
        assert!(phase_close(h[0], PI, 1e-12) && phase_close(h[1], 0.0, 1e-12));
    }

    #[test]
    fn phase_map_is_a_homomorphism() {
        let m = module();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let y = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let (px, py) = (phase_of_position(&m, x), phase_of_position(&m, y));
            let pxy = phase_of_position(&m, [x[0] + y[0], x[1] + y[1]]);
            for a in 0..2 {
                assert!(phase_close(pxy[a], px[a] + py[a], 1e-9));
            }
        }
    }

    #[test]
    fn rates_depend_only_on_shifted_phase() {
        let m = module();
        let x = [0.123, -0.456];
        let p = phase_of_position(&m, x);
        let shifted = IdealModule::new(0.4, m.orientation(), vec![[p[0], p[1]]], 2.0).unwrap();
        assert!(close(rate_2d_hex(&shifted, [0.0, 0.0])[0], rate_2d_hex(&m, x)[0], 1e-12));
    }

    #[test]
    fn validation() {
        assert_eq!(IdealModule::new(0.0, 0.0, vec![[0.0, 0.0]], 1.0), Err(GridCodeError::Period(0.0)));
        assert_eq!(IdealModule::new(0.3, 0.0, vec![], 1.0), Err(GridCodeError::NoCells));
        assert_eq!(IdealCode::new(vec![]), Err(GridCodeError::NoModules));
        let m = module();
        assert!(matches!(IdealCode::new(vec![m.clone(), m]), Err(GridCodeError::DuplicatePeriod(0, 1, _))));
    }

    #[test]
    fn states_are_unit_norm() {
        let code = IdealCode::two_module_oracle();
        let report = coding_diagnostics(
            &code,
            &Arena::square(1.0),
            &DiagnosticsConfig { pairs_per_bin: 10, separation_bins: 4, ..Default::default() },
        );
        assert!(close(report.min_norm, 1.0, 1e-12) && close(report.max_norm, 1.0, 1e-12));
    }

    #[test]
    fn single_module_capacity_saturates() {
        let code = IdealCode::default_oracle();
        let q = (0.4f64 / 0.05).round() as usize;
        assert_eq!(distinguishable_states(&code, &Arena::square(1.0), 0.05), q * q);
        assert_eq!(distinguishable_states(&code, &Arena::square(2.0), 0.05), q * q);
    }

    #[test]
    fn two_modules_exceed_either_module() {
        let code = IdealCode::two_module_oracle();
        let arena = Arena::square(2.0);
        let one = distinguishable_states(&code.prefix(1).unwrap(), &arena, 0.05);
        let other = distinguishable_states(&IdealCode::new(vec![code.modules()[1].clone()]).unwrap(), &arena, 0.05);
        let both = distinguishable_states(&code, &arena, 0.05);
        assert_eq!((one, other), (36, 81));
        assert!(both > one.max(other) && both <= one * other, "{both}");
        // at desk scale most of the product is reached
        assert!(both as f64 > 0.5 * (one * other) as f64, "{both}");
    }

    #[test]
    fn distance_curve_plateaus() {
        let code = IdealCode::two_module_oracle();
        let arena = Arena::square(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = code.min_period();
        let at = |d: f64, rng: &mut ChaCha8Rng| distance_at(&code, &arena, d, 4000, rng).mean;
        let (d0, d1, d2) = (at(0.0, &mut rng), at(l, &mut rng), at(2.0 * l, &mut rng));
        assert_eq!(d0, 0.0);
        assert!((d1 - d2).abs() / d2 < 0.10, "{d1} vs {d2}");
        assert!(at(0.05 * l, &mut rng) < 0.5 * d1);
    }

    #[test]
    fn analytic_ratemaps_sample_bin_centers() {
        let code = IdealCode::two_module_oracle();
        let maps = code.analytic_ratemaps(Arena::square(1.0), 0.02);
        assert_eq!((maps.len(), maps[0].bins_x, maps[0].bins_y), (128, 50, 50));
        let mut rates = vec![0.0; 128];
        code.rates_into(maps[70].bin_center(13, 31), &mut rates);
        assert_eq!(maps[70].get(13, 31), rates[70]);
        assert!(maps.iter().all(|m| m.peak > 0.9 && m.peak <= 1.0 + 1e-12));
    }
}
