//! Neural distance as a function of spatial and temporal separation.

use crate::gridcode::CurvePoint;
use crate::trajectory::{dist, Vec2};

/// States recorded along a trajectory, with where and when they were emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateSamples {
    pub units: usize,
    /// Row-major `len × units`.
    pub states: Vec<f64>,
    pub positions: Vec<Vec2>,
    pub times: Vec<usize>,
}

impl StateSamples {
    pub fn new(units: usize) -> Self {
        StateSamples { units, ..Default::default() }
    }

    pub fn push(&mut self, state: &[f64], position: Vec2, time: usize) {
        assert_eq!(state.len(), self.units, "state length must equal the unit count");
        self.states.extend_from_slice(state);
        self.positions.push(position);
        self.times.push(time);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.units..(i + 1) * self.units]
    }

    /// Same samples restricted to the given units, in the given order.
    pub fn select_units(&self, units: &[usize]) -> StateSamples {
        let mut out = StateSamples::new(units.len());
        out.positions = self.positions.clone();
        out.times = self.times.clone();
        out.states = (0..self.len()).flat_map(|i| units.iter().map(move |&u| self.states[i * self.units + u])).collect();
        out
    }

    fn neural_distance(&self, i: usize, j: usize) -> f64 {
        self.state(i).iter().zip(self.state(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurveConfig {
    /// Width of a spatial separation bin, meters.
    pub spatial_bin: f64,
    pub max_separation: f64,
    /// Width of a temporal separation bin, steps.
    pub temporal_bin: usize,
    pub max_lag: usize,
    /// Samples used for the all-pairs spatial curve.
    pub max_samples: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { spatial_bin: 0.01, max_separation: 1.0, temporal_bin: 1, max_lag: 200, max_samples: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceCurves {
    pub spatial: Vec<CurvePoint>,
    pub temporal: Vec<CurvePoint>,
    /// `(distance, fraction of training pairs closer than it)`.
    pub pair_distance_cdf: Vec<[f64; 2]>,
}

struct Bins {
    sum: Vec<f64>,
    sq: Vec<f64>,
    n: Vec<usize>,
}

impl Bins {
    fn new(k: usize) -> Self {
        Bins { sum: vec![0.0; k], sq: vec![0.0; k], n: vec![0; k] }
    }

    fn add(&mut self, bin: usize, v: f64) {
        if bin < self.n.len() {
            self.sum[bin] += v;
            self.sq[bin] += v * v;
            self.n[bin] += 1;
        }
    }

    fn finish(self, center: impl Fn(usize) -> f64) -> Vec<CurvePoint> {
        (0..self.n.len())
            .map(|b| {
                let n = self.n[b];
                let mean = if n > 0 { self.sum[b] / n as f64 } else { f64::NAN };
                let var = if n > 0 { (self.sq[b] / n as f64 - mean * mean).max(0.0) } else { f64::NAN };
                CurvePoint { separation: center(b), mean, std: var.sqrt(), count: n }
            })
            .collect()
    }
}

/// Mean neural distance binned by spatial separation over all pairs of an
/// evenly strided subset of at most `max_samples` samples.
pub fn spatial_curve(samples: &StateSamples, config: &CurveConfig) -> Vec<CurvePoint> {
    let k = (config.max_separation / config.spatial_bin).ceil() as usize;
    let mut bins = Bins::new(k);
    let stride = samples.len().div_ceil(config.max_samples.max(1)).max(1);
    let idx: Vec<usize> = (0..samples.len()).step_by(stride).collect();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d = dist(samples.positions[i], samples.positions[j]);
            bins.add((d / config.spatial_bin) as usize, samples.neural_distance(i, j));
        }
    }
    bins.finish(|b| (b as f64 + 0.5) * config.spatial_bin)
}

/// Mean neural distance binned by `|t − t′|` up to `max_lag` steps. Sample
/// times must be increasing.
pub fn temporal_curve(samples: &StateSamples, config: &CurveConfig) -> Vec<CurvePoint> {
    let w = config.temporal_bin.max(1);
    let mut bins = Bins::new(config.max_lag / w + 1);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let lag = samples.times[j].abs_diff(samples.times[i]);
            if lag > config.max_lag {
                break;
            }
            bins.add(lag / w, samples.neural_distance(i, j));
        }
    }
    bins.finish(|b| (b * w) as f64 + (w as f64 - 1.0) / 2.0)
}

/// Empirical CDF of pairwise distances between `positions`, evaluated at `grid`.
pub fn pair_distance_cdf(positions: &[Vec2], grid: &[f64]) -> Vec<[f64; 2]> {
    let mut d: Vec<f64> = Vec::with_capacity(positions.len() * positions.len().saturating_sub(1) / 2);
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            d.push(dist(positions[i], positions[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len().max(1) as f64;
    grid.iter().map(|&g| [g, d.partition_point(|&x| x <= g) as f64 / n]).collect()
}

/// Spatial and temporal curves, plus the pair-distance CDF of `training_positions`.
pub fn distance_curves(
    spatial: &StateSamples,
    temporal: &StateSamples,
    training_positions: &[Vec2],
    config: &CurveConfig,
) -> DistanceCurves {
    let k = (config.max_separation / config.spatial_bin).ceil() as usize;
    let grid: Vec<f64> = (1..=k).map(|b| b as f64 * config.spatial_bin).collect();
    DistanceCurves {
        spatial: spatial_curve(spatial, config),
        temporal: temporal_curve(temporal, config),
        pair_distance_cdf: pair_distance_cdf(training_positions, &grid),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gridcode::{distance_at, IdealCode};
    use crate::trajectory::{sample_eval_trajectory, Arena, EvalWalk};

    fn oracle_samples(code: &IdealCode, steps: usize, stride: usize) -> StateSamples {
        let traj = sample_eval_trajectory(&Arena::square(2.0), &EvalWalk::default(), steps, &mut ChaCha8Rng::seed_from_u64(7));
        let mut s = StateSamples::new(code.units());
        for (t, &p) in traj.positions.iter().enumerate().step_by(stride) {
            s.push(&code.state(p), p, t);
        }
        s
    }

    #[test]
    fn identical_states_give_flat_zero() {
        let mut s = StateSamples::new(3);
        for t in 0..50 {
            s.push(&[0.6, 0.8, 0.0], [t as f64 * 0.01, 0.0], t);
        }
        let cfg = CurveConfig { max_separation: 0.5, max_lag: 10, ..Default::default() };
        for p in spatial_curve(&s, &cfg).iter().chain(&temporal_curve(&s, &cfg)) {
            assert!(p.count == 0 || p.mean == 0.0);
        }
    }

    #[test]
    fn oracle_curve_matches_gridcode_diagnostic() {
        let code = IdealCode::two_module_oracle();
        let samples = oracle_samples(&code, 400_000, 100);
        let cfg = CurveConfig { spatial_bin: 0.02, max_separation: 0.9, ..Default::default() };
        let curve = spatial_curve(&samples, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for b in [15usize, 29, 44] {
            let want = distance_at(&code, &Arena::square(2.0), curve[b].separation, 4000, &mut rng).mean;
            assert!((curve[b].mean - want).abs() < 0.05 * want, "bin {b}: {} vs {want}", curve[b].mean);
        }
        // zero separation: path-independent code reproduces the same state
        assert!(curve[0].mean < 0.2 * curve[29].mean);
    }

    #[test]
    fn temporal_curve_grows_from_zero() {
        let code = IdealCode::default_oracle();
        let samples = oracle_samples(&code, 3000, 1);
        let curve = temporal_curve(&samples, &CurveConfig { max_lag: 50, ..Default::default() });
        assert_eq!(curve[0].count, 0);
        assert!(curve[1].mean < curve[10].mean);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let ps: Vec<Vec2> = (0..30).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()]).collect();
        let cdf = pair_distance_cdf(&ps, &[0.1, 0.5, 1.0, 3.0]);
        assert!(cdf.windows(2).all(|w| w[0][1] <= w[1][1]));
        assert_eq!(cdf[3][1], 1.0);
    }
}
