//! End-to-end evaluation of a state source: a trained network or the ideal
//! grid code, driven along a long exploratory walk.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::autocorr::{autocorrelogram, grid_score, Autocorrelogram};
use super::cluster::{cluster_modules, ClusterConfig, ModuleReport};
use super::commutation::{commutation_report, CommutationReport};
use super::curves::{distance_curves, CurveConfig, DistanceCurves, StateSamples};
use super::image::{autocorrelogram_gray, montage, ratemap_gray};
use super::ratemap::{Ratemap, RatemapAccumulator};
use super::spectral::{hex_spectrum, UnitSpectralSummary};
use super::torus::{torus_analysis, TorusConfig, TorusReport};
use super::EvalError;
use crate::gridcode::IdealCode;
use crate::model::{matvec, norm_relu, ModelError, ModelParams};
use crate::trajectory::{sample_eval_trajectory, Arena, EvalTrajectory, EvalWalk, Vec2, VelocityDist};

/// Velocities whose interaction matrices are computed in one batch.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    /// Side of the square arena, meters.
    pub arena_side: f64,
    /// Ratemap bin size; `None` scales 2 cm per 2 m of arena.
    pub bin_size: Option<f64>,
    pub steps: usize,
    pub walk: EvalWalk,
    pub min_occupancy: u32,
    /// States kept (evenly strided) for the torus and spatial-distance analyses.
    pub recorded_samples: usize,
    /// Leading consecutive states kept for the temporal-distance curve.
    pub temporal_window: usize,
    pub commutation_states: usize,
    pub commutation_pairs: usize,
    /// Velocity distribution of the commutation probes.
    pub velocity: VelocityDist,
    pub cluster: ClusterConfig,
    pub torus: TorusConfig,
    pub curves: CurveConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            arena_side: 2.0,
            bin_size: None,
            steps: 1_000_000,
            walk: EvalWalk::default(),
            min_occupancy: 10,
            recorded_samples: 20_000,
            temporal_window: 5_000,
            commutation_states: 200,
            commutation_pairs: 5,
            velocity: VelocityDist::default(),
            cluster: ClusterConfig::default(),
            torus: TorusConfig::default(),
            curves: CurveConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn bin_size(&self) -> f64 {
        self.bin_size.unwrap_or(0.01 * self.arena_side)
    }

    pub fn arena(&self) -> Arena {
        Arena::square(self.arena_side)
    }

    fn validate(&self) -> Result<(), EvalError> {
        let bad = |what: &str| Err(EvalError::Config(what.to_string()));
        if !(self.arena_side > 0.0 && self.arena_side.is_finite()) {
            return bad("arena side must be positive");
        }
        if !(self.bin_size() > 0.0) || self.bin_size() > self.arena_side {
            return bad("bin size must be positive and no larger than the arena");
        }
        if self.steps == 0 || self.recorded_samples == 0 {
            return bad("steps and recorded samples must be positive");
        }
        Ok(())
    }
}

/// What produces population states along the walk.
#[derive(Clone, Copy, Debug)]
pub enum StateSource<'a> {
    Oracle(&'a IdealCode),
    /// Integrated from `g₀` at the start of the walk.
    Model(&'a ModelParams<f64>),
}

impl StateSource<'_> {
    pub fn units(&self) -> usize {
        match self {
            StateSource::Oracle(code) => code.units(),
            StateSource::Model(params) => params.units(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StateSource::Oracle(_) => "oracle",
            StateSource::Model(_) => "model",
        }
    }

    /// Calls `f(t, position, state)` for every step of `traj`.
    pub fn visit(&self, traj: &EvalTrajectory, mut f: impl FnMut(usize, Vec2, &[f64])) -> Result<(), EvalError> {
        match self {
            StateSource::Oracle(code) => {
                let mut g = vec![0.0; code.units()];
                for (t, &p) in traj.positions.iter().enumerate() {
                    code.state_into(p, &mut g);
                    f(t, p, &g);
                }
            }
            StateSource::Model(params) => {
                let n = params.units();
                let mut g = params.g0().to_vec();
                for (c, vs) in traj.velocities.chunks(CHUNK).enumerate() {
                    let ws = params.interaction_matrices(vs);
                    for (k, w) in ws.chunks(n * n).enumerate() {
                        let t = c * CHUNK + k;
                        g = norm_relu(&matvec(w, &g)).map_err(|_| ModelError::Degenerate { step: t, trajectory: 0 })?;
                        f(t, traj.positions[t], &g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Torus analysis of one recovered module.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModuleTorus {
    pub module: usize,
    pub report: Option<TorusReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub arena_side: f64,
    pub bin_size: f64,
    pub steps: usize,
    pub seed: u64,
    pub units: usize,
    pub mean_valid_fraction: f64,
    pub summaries: Vec<UnitSpectralSummary>,
    pub modules: ModuleReport,
    pub torus: Vec<ModuleTorus>,
    /// Empty bins are omitted.
    pub curves: DistanceCurves,
    pub commutation: Option<CommutationReport>,
}

/// Report plus the per-unit maps it was derived from.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub ratemaps: Vec<Ratemap>,
    pub autocorrelograms: Vec<Option<Autocorrelogram>>,
}

fn analyze_unit(map: &Ratemap) -> (UnitSpectralSummary, Option<Autocorrelogram>) {
    if map.is_dead() {
        return (UnitSpectralSummary { unit: map.unit, dead: true, grid_score: None, spectrum: None }, None);
    }
    let ac = autocorrelogram(map).ok();
    let summary =
        UnitSpectralSummary { unit: map.unit, dead: false, grid_score: ac.as_ref().and_then(grid_score), spectrum: hex_spectrum(map) };
    (summary, ac)
}

fn module_states(samples: &StateSamples, units: &[usize]) -> StateSamples {
    let mut s = samples.select_units(units);
    for row in s.states.chunks_mut(units.len().max(1)) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    s
}

/// Runs the full analysis. `training_positions` feeds the pair-distance CDF
/// and may be empty.
pub fn evaluate(source: StateSource<'_>, config: &EvalConfig, training_positions: &[Vec2]) -> Result<EvalOutput, EvalError> {
    config.validate()?;
    let arena = config.arena();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let traj = sample_eval_trajectory(&arena, &config.walk, config.steps, &mut rng);

    let n = source.units();
    let mut acc = RatemapAccumulator::new(arena, config.bin_size(), n);
    let stride = (config.steps / config.recorded_samples).max(1);
    let mut recorded = StateSamples::new(n);
    let mut temporal = StateSamples::new(n);
    source.visit(&traj, |t, p, g| {
        acc.add(p, g);
        if t % stride == 0 {
            recorded.push(g, p, t);
        }
        if t < config.temporal_window {
            temporal.push(g, p, t);
        }
    })?;

    let ratemaps = acc.finish(config.min_occupancy);
    let (summaries, autocorrelograms): (Vec<_>, Vec<_>) = ratemaps.par_iter().map(analyze_unit).unzip();
    let modules = cluster_modules(&summaries, &config.cluster);

    let torus = modules
        .modules
        .par_iter()
        .enumerate()
        .map(|(m, module)| match torus_analysis(&module_states(&recorded, &module.units), &module.phases, &config.torus) {
            Ok(r) => ModuleTorus { module: m, report: Some(r), error: None },
            Err(e) => ModuleTorus { module: m, report: None, error: Some(e.to_string()) },
        })
        .collect();

    let mut curves = distance_curves(&recorded, &temporal, training_positions, &config.curves);
    curves.spatial.retain(|p| p.count > 0);
    curves.temporal.retain(|p| p.count > 0);

    let commutation = match source {
        StateSource::Model(params) if config.commutation_states > 0 => {
            let step = recorded.len().div_ceil(config.commutation_states).max(1);
            let states: Vec<Vec<f64>> = (0..recorded.len()).step_by(step).map(|i| recorded.state(i).to_vec()).collect();
            let mut crng = ChaCha8Rng::seed_from_u64(config.seed);
            crng.set_stream(1);
            Some(commutation_report(params, &states, config.commutation_pairs, &config.velocity, &mut crng)?)
        }
        _ => None,
    };

    let mean_valid_fraction = ratemaps.iter().map(Ratemap::valid_fraction).sum::<f64>() / n.max(1) as f64;
    let report = EvalReport {
        source: source.name().to_string(),
        arena_side: config.arena_side,
        bin_size: config.bin_size(),
        steps: config.steps,
        seed: config.seed,
        units: n,
        mean_valid_fraction,
        summaries,
        modules,
        torus,
        curves,
        commutation,
    };
    Ok(EvalOutput { report, ratemaps, autocorrelograms })
}

/// Human-readable digest of a report.
pub fn render_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let m = &report.modules;
    let _ = writeln!(s, "source            {}", report.source);
    let _ =
        writeln!(s, "arena             {} m, bins {} m, {} steps, seed {}", report.arena_side, report.bin_size, report.steps, report.seed);
    let _ = writeln!(s, "units             {} ({} dead, {} unclassified)", report.units, m.dead, m.unclassified);
    let _ = writeln!(s, "valid bins        {:.1}%", 100.0 * report.mean_valid_fraction);
    let scores: Vec<f64> = report.summaries.iter().filter_map(|u| u.grid_score.map(|g| g.score)).collect();
    if !scores.is_empty() {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(s, "grid score        mean {mean:.3}, min {min:.3} over {} units", scores.len());
    }
    let _ = writeln!(s, "modules           {}", m.modules.len());
    for (k, module) in m.modules.iter().enumerate() {
        let u = &module.uniformity;
        let _ = writeln!(
            s,
            "  [{k}] {:3} units  period {:.4} ± {:.4} m  orientation {:.2} ± {:.2} deg  phases {} (p = {:.3}, {:.3}, {:.3})",
            module.units.len(),
            module.mean_period,
            module.period_std,
            module.mean_orientation.to_degrees(),
            module.orientation_std.to_degrees(),
            if u.uniform { "uniform" } else { "clustered" },
            u.p_values[0],
            u.p_values[1],
            u.p_values[2],
        );
    }
    for t in &report.torus {
        match (&t.report, &t.error) {
            (Some(r), _) => {
                let ring: Vec<String> = r.projections.iter().map(|p| format!("{:.3}", p.ringness)).collect();
                let _ = writeln!(s, "torus [{}]         rings {} of 3, ring-ness {}", t.module, r.rings(), ring.join(" "));
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "torus [{}]         {e}", t.module);
            }
            (None, None) => {}
        }
    }
    if let Some(c) = &report.commutation {
        let _ = writeln!(s, "commutation       mean {:.3e}, max {:.3e}, stationarity {:.3e}", c.mean, c.max, c.stationarity);
    }
    let _ = writeln!(s, "\nunit  dead  score   period   orient  module");
    for (u, summary) in report.summaries.iter().enumerate() {
        let score = summary.grid_score.map_or("-".into(), |g| format!("{:.3}", g.score));
        let (period, orient) = summary
            .spectrum
            .map_or(("-".into(), "-".into()), |sp| (format!("{:.4}", sp.period), format!("{:.2}", sp.orientation.to_degrees())));
        let module = m.assignments[u].map_or("-".into(), |k| k.to_string());
        let _ = writeln!(s, "{u:4}  {:4}  {score:>6}  {period:>7}  {orient:>6}  {module:>6}", if summary.dead { "yes" } else { "no" });
    }
    s
}

/// Writes `report.json`, `report.txt`, one ratemap file per unit, grayscale
/// images of every ratemap and autocorrelogram, and a color montage.
pub fn write_artifacts(dir: &Path, output: &EvalOutput) -> Result<(), EvalError> {
    let maps_dir = dir.join("ratemaps");
    let images_dir = dir.join("images");
    fs::create_dir_all(&maps_dir)?;
    fs::create_dir_all(&images_dir)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("report.json"))?), &output.report)?;
    fs::write(dir.join("report.txt"), render_text(&output.report))?;
    for map in &output.ratemaps {
        map.write(BufWriter::new(File::create(maps_dir.join(format!("unit_{:03}.gsrm", map.unit)))?))?;
        ratemap_gray(map).write_pgm(BufWriter::new(File::create(images_dir.join(format!("ratemap_{:03}.pgm", map.unit)))?))?;
    }
    for (u, ac) in output.autocorrelograms.iter().enumerate() {
        if let Some(ac) = ac {
            autocorrelogram_gray(ac).write_pgm(BufWriter::new(File::create(images_dir.join(format!("autocorr_{u:03}.pgm")))?))?;
        }
    }
    let columns = (output.ratemaps.len() as f64).sqrt().ceil() as usize;
    montage(&output.ratemaps, columns).write_ppm(BufWriter::new(File::create(dir.join("montage.ppm"))?))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_oracle_round_trip() {
        let code = IdealCode::default_oracle();
        let config = EvalConfig { steps: 400_000, bin_size: Some(0.04), ..Default::default() };
        let out = evaluate(StateSource::Oracle(&code), &config, &[]).unwrap();
        let r = &out.report;
        assert_eq!(r.modules.modules.len(), 1, "{}", render_text(r));
        let module = &r.modules.modules[0];
        assert_eq!(module.units.len(), 64);
        assert!((module.mean_period - 0.4).abs() < 0.02);
        assert!((module.mean_orientation.to_degrees() - 7.5).abs() < 2.0);
        assert!(module.uniformity.uniform);
        assert_eq!(r.torus[0].report.as_ref().unwrap().rings(), 3);
        assert!(r.commutation.is_none());
    }

    #[test]
    fn model_source_runs_and_writes_artifacts() {
        let params = ModelParams::init(8, 16, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let config = EvalConfig {
            steps: 20_000,
            bin_size: Some(0.1),
            recorded_samples: 2_000,
            temporal_window: 500,
            commutation_states: 10,
            torus: TorusConfig { min_samples: 500, max_embed_samples: 500, krylov_dims: 60, ..Default::default() },
            ..Default::default()
        };
        let positions: Vec<Vec2> = (0..40).map(|i| [0.01 * i as f64, 0.0]).collect();
        let out = evaluate(StateSource::Model(&params), &config, &positions).unwrap();
        let c = out.report.commutation.unwrap();
        assert_eq!(c.pairs, 50);
        assert!(out.report.curves.pair_distance_cdf.last().unwrap()[1] == 1.0);

        let again = evaluate(StateSource::Model(&params), &config, &positions).unwrap();
        assert_eq!(out.report, again.report);

        let dir = tempfile::tempdir().unwrap();
        write_artifacts(dir.path(), &out).unwrap();
        let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.summaries.len(), 8);
        assert!(dir.path().join("ratemaps/unit_007.gsrm").exists());
        assert!(dir.path().join("montage.ppm").exists());
    }

    #[test]
    fn rejects_bad_config() {
        let code = IdealCode::default_oracle();
        let config = EvalConfig { arena_side: -1.0, ..Default::default() };
        assert!(matches!(evaluate(StateSource::Oracle(&code), &config, &[]), Err(EvalError::Config(_))));
    }
}
