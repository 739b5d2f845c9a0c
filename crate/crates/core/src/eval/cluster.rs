//! Grouping units into modules by period and orientation, and testing
//! whether the phases inside a module tile the torus.

use std::f64::consts::PI;

use super::spectral::UnitSpectralSummary;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterConfig {
    /// Relative period difference treated as the same module.
    pub period_tolerance: f64,
    /// Orientation difference (mod 60°) treated as the same module, in degrees.
    pub orientation_tolerance_deg: f64,
    /// Neighbors (including the point itself) that make a core point.
    pub min_points: usize,
    /// Family-wise significance level of the phase-uniformity test.
    pub alpha: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { period_tolerance: 0.10, orientation_tolerance_deg: 5.0, min_points: 3, alpha: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseUniformity {
    /// Mean resultant length of each phase axis.
    pub resultant: [f64; 3],
    /// Rayleigh p-value of each phase axis.
    pub p_values: [f64; 3],
    /// No axis rejects uniformity at `alpha / 3`.
    pub uniform: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModuleSummary {
    pub units: Vec<usize>,
    pub mean_period: f64,
    pub period_std: f64,
    /// Circular mean mod 60°, radians.
    pub mean_orientation: f64,
    pub orientation_std: f64,
    pub phases: Vec<[f64; 3]>,
    pub uniformity: PhaseUniformity,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModuleReport {
    /// Module of each summarized unit, in input order; `None` for dead,
    /// non-hexagonal or noise units.
    pub assignments: Vec<Option<usize>>,
    /// Modules sorted by increasing period.
    pub modules: Vec<ModuleSummary>,
    pub dead: usize,
    pub unclassified: usize,
}

/// Rayleigh test p-value for `n` angles with mean resultant length `r`
/// (Zar's approximation).
pub fn rayleigh_p(n: usize, r: f64) -> f64 {
    let n = n as f64;
    let z = n * r * r;
    let p = (-z).exp()
        * (1.0 + (2.0 * z - z * z) / (4.0 * n) - (24.0 * z - 132.0 * z * z + 76.0 * z.powi(3) - 9.0 * z.powi(4)) / (288.0 * n * n));
    p.clamp(0.0, 1.0)
}

fn resultant(angles: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut c, mut s, mut n) = (0.0, 0.0, 0);
    for a in angles {
        c += a.cos();
        s += a.sin();
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    ((c * c + s * s).sqrt() / n as f64, s.atan2(c), n)
}

/// Rayleigh test on each of the three phase axes with Bonferroni correction.
pub fn phase_uniformity(phases: &[[f64; 3]], alpha: f64) -> PhaseUniformity {
    let mut r = [0.0; 3];
    let mut p = [1.0; 3];
    for a in 0..3 {
        let (len, _, n) = resultant(phases.iter().map(|ph| ph[a]));
        r[a] = len;
        p[a] = if n > 0 { rayleigh_p(n, len) } else { 1.0 };
    }
    PhaseUniformity { resultant: r, p_values: p, uniform: p.iter().all(|&v| v > alpha / 3.0) }
}

fn orientation_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI / 3.0);
    d.min(PI / 3.0 - d)
}

/// Density-based clustering (DBSCAN) of classified units in
/// `(log period, orientation mod 60°)`, with the neighborhood given by the
/// period and orientation tolerances.
pub fn cluster_modules(summaries: &[UnitSpectralSummary], config: &ClusterConfig) -> ModuleReport {
    let points: Vec<(usize, f64, f64)> = summaries
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_classified())
        .map(|(i, s)| {
            let sp = s.spectrum.unwrap();
            (i, sp.period.ln(), sp.orientation)
        })
        .collect();
    let lp = (1.0 + config.period_tolerance).ln();
    let lo = config.orientation_tolerance_deg.to_radians();
    let near = |a: usize, b: usize| (points[a].1 - points[b].1).abs() <= lp && orientation_gap(points[a].2, points[b].2) <= lo;
    let neighbors: Vec<Vec<usize>> = (0..points.len()).map(|a| (0..points.len()).filter(|&b| near(a, b)).collect()).collect();

    let mut label: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut clusters = 0;
    for start in 0..points.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        if neighbors[start].len() < config.min_points {
            continue;
        }
        let id = clusters;
        clusters += 1;
        label[start] = Some(id);
        let mut queue: Vec<usize> = neighbors[start].clone();
        while let Some(q) = queue.pop() {
            if label[q].is_none() {
                label[q] = Some(id);
            }
            if !visited[q] {
                visited[q] = true;
                if neighbors[q].len() >= config.min_points {
                    queue.extend(neighbors[q].iter().copied().filter(|&r| label[r].is_none()));
                }
            }
        }
    }

    let mut modules: Vec<ModuleSummary> = (0..clusters)
        .map(|id| {
            let members: Vec<usize> = (0..points.len()).filter(|&p| label[p] == Some(id)).collect();
            let specs: Vec<_> = members.iter().map(|&p| summaries[points[p].0].spectrum.unwrap()).collect();
            let n = specs.len() as f64;
            let mean_period = specs.iter().map(|s| s.period).sum::<f64>() / n;
            let period_std = (specs.iter().map(|s| (s.period - mean_period).powi(2)).sum::<f64>() / n).sqrt();
            // Orientation lives on a 60° circle: average it as an angle ×6.
            let (_, mean6, _) = resultant(specs.iter().map(|s| s.orientation * 6.0));
            let mean_orientation = (mean6 / 6.0).rem_euclid(PI / 3.0);
            let orientation_std = (specs.iter().map(|s| orientation_gap(s.orientation, mean_orientation).powi(2)).sum::<f64>() / n).sqrt();
            let phases: Vec<[f64; 3]> = specs.iter().map(|s| s.phases).collect();
            ModuleSummary {
                units: members.iter().map(|&p| summaries[points[p].0].unit).collect(),
                mean_period,
                period_std,
                mean_orientation,
                orientation_std,
                uniformity: phase_uniformity(&phases, config.alpha),
                phases,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..clusters).collect();
    order.sort_by(|&a, &b| modules[a].mean_period.total_cmp(&modules[b].mean_period));
    let mut rank = vec![0; clusters];
    for (pos, &id) in order.iter().enumerate() {
        rank[id] = pos;
    }
    let mut slots: Vec<Option<ModuleSummary>> = modules.drain(..).map(Some).collect();
    let modules: Vec<ModuleSummary> = order.iter().map(|&id| slots[id].take().unwrap()).collect();

    let mut assignments = vec![None; summaries.len()];
    for (p, l) in label.iter().enumerate() {
        assignments[points[p].0] = l.map(|id| rank[id]);
    }
    let dead = summaries.iter().filter(|s| s.dead).count();
    let unclassified = assignments.iter().zip(summaries).filter(|(a, s)| a.is_none() && !s.dead).count();
    ModuleReport { assignments, modules, dead, unclassified }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use std::f64::consts::TAU;

    use super::*;
    use crate::eval::spectral::HexSpectrum;

    fn unit(i: usize, period: f64, theta_deg: f64, phases: [f64; 3]) -> UnitSpectralSummary {
        let spectrum = HexSpectrum {
            period,
            orientation: theta_deg.to_radians().rem_euclid(PI / 3.0),
            wavevectors: [[0.0; 2]; 3],
            phases,
            closure_residual: 0.0,
            powers: [1.0; 3],
            balance: 1.0,
            contrast: 100.0,
        };
        UnitSpectralSummary { unit: i, dead: false, grid_score: None, spectrum: Some(spectrum) }
    }

    fn uniform_phases(k: usize) -> [f64; 3] {
        let (i, j) = ((k / 8) as f64 * TAU / 8.0, (k % 8) as f64 * TAU / 8.0);
        [i, j, (-i - j).rem_euclid(TAU)]
    }

    #[test]
    fn two_modules_separate_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut units = Vec::new();
        for k in 0..128 {
            let (period, theta) = if k % 2 == 0 { (0.30, 7.5) } else { (0.45, 20.0) };
            units.push(unit(k, period * (1.0 + rng.gen_range(-0.02..0.02)), theta + rng.gen_range(-1.0..1.0), uniform_phases(k / 2)));
        }
        let report = cluster_modules(&units, &ClusterConfig::default());
        assert_eq!(report.modules.len(), 2);
        for (k, a) in report.assignments.iter().enumerate() {
            assert_eq!(*a, Some(k % 2));
        }
        assert!((report.modules[0].mean_period - 0.30).abs() < 0.01);
        assert!((report.modules[1].mean_orientation.to_degrees() - 20.0).abs() < 1.0);
        assert!(report.modules.iter().all(|m| m.uniformity.uniform));
    }

    #[test]
    fn single_module_and_wraparound() {
        // orientations straddling 0°/60° still form one module
        let units: Vec<_> = (0..20).map(|k| unit(k, 0.4, if k % 2 == 0 { 59.0 } else { 1.0 }, uniform_phases(k))).collect();
        let report = cluster_modules(&units, &ClusterConfig::default());
        assert_eq!(report.modules.len(), 1);
        assert_eq!(report.unclassified, 0);
        let m = report.modules[0].mean_orientation.to_degrees();
        assert!(m < 0.5 || m > 59.5, "{m}");
    }

    #[test]
    fn isolated_units_are_noise() {
        let mut units: Vec<_> = (0..10).map(|k| unit(k, 0.4, 10.0, uniform_phases(k))).collect();
        units.push(unit(10, 0.9, 40.0, [0.0; 3]));
        let mut dead = unit(11, 0.4, 10.0, [0.0; 3]);
        dead.dead = true;
        units.push(dead);
        let report = cluster_modules(&units, &ClusterConfig::default());
        assert_eq!(report.modules.len(), 1);
        assert_eq!((report.assignments[10], report.assignments[11]), (None, None));
        assert_eq!((report.dead, report.unclassified), (1, 1));
    }

    #[test]
    fn concentrated_phases_fail_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tight: Vec<[f64; 3]> = (0..40).map(|_| [rng.gen_range(0.0..0.5), rng.gen_range(0.0..TAU), 1.0]).collect();
        let u = phase_uniformity(&tight, 0.05);
        assert!(!u.uniform && u.p_values[0] < 1e-6);
        let spread: Vec<[f64; 3]> = (0..64).map(uniform_phases).collect();
        let u = phase_uniformity(&spread, 0.05);
        assert!(u.uniform && u.resultant.iter().all(|&r| r < 1e-12), "{u:?}");
    }

    #[test]
    fn rayleigh_matches_exact_limit() {
        assert!((rayleigh_p(1000, 0.0) - 1.0).abs() < 1e-12);
        // large n: p → exp(−n r²)
        let p = rayleigh_p(100_000, 0.005);
        assert!((p - (-2.5f64).exp()).abs() < 1e-3);
    }
}
