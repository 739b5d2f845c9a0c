use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gridssl::eval::pipeline::{evaluate, render_text, write_artifacts, EvalConfig, EvalReport, StateSource};
use gridssl::eval::EvalError;
use gridssl::gridcode::{coding_diagnostics, DiagnosticsConfig, IdealCode};
use gridssl::io::BinaryError;
use gridssl::model::ModelParams;
use gridssl::trainer::{prepare_batch, read_metrics, run_training, StepRecord, TrainConfig, TrainError, METRICS_FILE};
use gridssl::trajectory::{Arena, Vec2};
use gridssl::Precision;

use crate::config::{Ablation, ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Binary(#[from] BinaryError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 configuration, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Train(e) => match e {
                TrainError::Config(_) => 2,
                TrainError::NonFinite { .. } | TrainError::Model(_) => 3,
                TrainError::Binary(_) | TrainError::Io(_) | TrainError::Json(_) => 4,
            },
            CliError::Eval(e) => match e {
                EvalError::Config(_) => 2,
                EvalError::Coverage { .. } | EvalError::ConstantMap(_) | EvalError::Samples(_) | EvalError::Model(_) => 3,
                EvalError::Binary(_) | EvalError::Io(_) | EvalError::Json(_) => 4,
            },
            CliError::Binary(_) | CliError::File { .. } | CliError::Io(_) | CliError::Json(_) => 4,
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::File { path: p.to_path_buf(), source })?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

/// Fresh `<root>/<timestamp>-seed<k>` directory.
pub fn new_run_dir(root: &Path, seed: u64) -> Result<PathBuf, CliError> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut k = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn log_line(r: &StepRecord) -> String {
    format!(
        "step {:>8}  total {:>10.5}  sep {:.5}  inv {:.5}  cap {:.5}  coniso {:.5}  lr {:.2e}",
        r.step, r.total, r.sep, r.inv, r.cap, r.coniso, r.lr
    )
}

pub fn train(config: &RunConfig, run_dir: &Path, resume: Option<&Path>, log_every: u64) -> Result<PathBuf, CliError> {
    fs::write(run_dir.join("run.cfg"), config.to_text())?;
    let on_step = |r: &StepRecord| {
        if log_every > 0 && r.step % log_every == 0 {
            println!("{}", log_line(r));
        }
    };
    let outcome = match config.train.precision {
        Precision::F64 => run_training::<f64>(&config.train, run_dir, resume, on_step)?,
        Precision::F32 => run_training::<f32>(&config.train, run_dir, resume, on_step)?,
    };
    println!("trained {} steps; checkpoint {}", outcome.steps, outcome.final_checkpoint.display());
    Ok(outcome.final_checkpoint)
}

/// Run directory owning a checkpoint at `<run>/checkpoints/<file>`.
pub fn run_dir_of(checkpoint: &Path) -> Result<PathBuf, CliError> {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| CliError::Usage(format!("{} is not inside a run directory", checkpoint.display())))
}

fn eval_config(config: &RunConfig, arena: f64) -> EvalConfig {
    EvalConfig {
        arena_side: arena,
        bin_size: config.eval_bin_size,
        steps: config.eval_steps,
        walk: config.eval_walk,
        min_occupancy: config.eval_min_occupancy,
        velocity: config.train.velocity,
        seed: config.train.seed,
        ..EvalConfig::default()
    }
}

fn training_positions(train: &TrainConfig) -> Vec<Vec2> {
    prepare_batch(train, 0).batch.flat_positions()
}

pub enum Source {
    Checkpoint(PathBuf),
    Oracle(IdealCode),
}

fn arena_dir(run_dir: &Path, arena: f64) -> PathBuf {
    run_dir.join(format!("arena-{arena}m"))
}

/// Evaluates `source` in every configured arena, one subdirectory each.
pub fn eval(config: &RunConfig, source: &Source, run_dir: &Path) -> Result<Vec<EvalReport>, CliError> {
    let params;
    let state = match source {
        Source::Checkpoint(path) => {
            let file = File::open(path).map_err(|source| CliError::File { path: path.clone(), source })?;
            params = ModelParams::<f64>::read_checkpoint(BufReader::new(file))?;
            StateSource::Model(&params)
        }
        Source::Oracle(code) => StateSource::Oracle(code),
    };
    let positions = training_positions(&config.train);
    let mut reports = Vec::new();
    for &arena in &config.eval_arenas {
        let out = evaluate(state, &eval_config(config, arena), &positions)?;
        let dir = arena_dir(run_dir, arena);
        write_artifacts(&dir, &out)?;
        let r = &out.report;
        println!("arena {arena} m: {} units, {} dead, {} modules -> {}", r.units, r.modules.dead, r.modules.modules.len(), dir.display());
        reports.push(out.report);
    }
    Ok(reports)
}

pub fn oracle(code: &IdealCode, arena: f64, bin_size: f64, seed: u64, run_dir: &Path) -> Result<(), CliError> {
    if !(arena > 0.0 && bin_size > 0.0 && bin_size <= arena) {
        return Err(CliError::Usage("arena and bin size must be positive, with the bin no larger than the arena".into()));
    }
    let square = Arena::square(arena);
    let maps = code.analytic_ratemaps(square, bin_size);
    let maps_dir = run_dir.join("ratemaps");
    let images_dir = run_dir.join("images");
    fs::create_dir_all(&maps_dir)?;
    fs::create_dir_all(&images_dir)?;
    for m in &maps {
        m.write(BufWriter::new(File::create(maps_dir.join(format!("unit_{:03}.gsrm", m.unit)))?))?;
        gridssl::eval::image::ratemap_gray(m)
            .write_pgm(BufWriter::new(File::create(images_dir.join(format!("ratemap_{:03}.pgm", m.unit)))?))?;
    }
    let columns = (maps.len() as f64).sqrt().ceil() as usize;
    gridssl::eval::image::montage(&maps, columns).write_ppm(BufWriter::new(File::create(run_dir.join("montage.ppm"))?))?;

    let diagnostics = coding_diagnostics(code, &square, &DiagnosticsConfig { seed, ..DiagnosticsConfig::default() });
    let modules: Vec<serde_json::Value> = code
        .modules()
        .iter()
        .map(|m| serde_json::json!({ "period": m.period(), "orientation_deg": m.orientation().to_degrees(), "cells": m.cells() }))
        .collect();
    let doc = serde_json::json!({ "arena": arena, "bin_size": bin_size, "modules": modules, "diagnostics": diagnostics });
    serde_json::to_writer_pretty(BufWriter::new(File::create(run_dir.join("oracle.json"))?), &doc)?;
    for (count, states) in &diagnostics.distinguishable {
        println!("modules {count}: {states} distinguishable states");
    }
    println!("{} oracle ratemaps -> {}", maps.len(), run_dir.display());
    Ok(())
}

/// Outcome of one ablation variant.
pub struct AblationResult {
    pub name: String,
    pub result: Result<String, CliError>,
}

fn run_variant(base: &RunConfig, name: &str, train: TrainConfig, dir: &Path) -> Result<String, CliError> {
    fs::create_dir_all(dir)?;
    let config = RunConfig { train, ..base.clone() };
    let checkpoint = train_quiet(&config, dir)?;
    let arena = config.eval_arenas.first().copied().unwrap_or(2.0);
    let reports = eval(&RunConfig { eval_arenas: vec![arena], ..config.clone() }, &Source::Checkpoint(checkpoint), dir)?;
    let last = read_metrics(&dir.join(METRICS_FILE))?.pop();
    let r = &reports[0];
    Ok(format!(
        "{name:<18} final total {:>10}  modules {}  dead {}  unclassified {}",
        last.map_or("-".to_string(), |l| format!("{:.5}", l.total)),
        r.modules.modules.len(),
        r.modules.dead,
        r.modules.unclassified
    ))
}

fn train_quiet(config: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
    fs::write(dir.join("run.cfg"), config.to_text())?;
    let outcome = match config.train.precision {
        Precision::F64 => run_training::<f64>(&config.train, dir, None, |_| {})?,
        Precision::F32 => run_training::<f32>(&config.train, dir, None, |_| {})?,
    };
    Ok(outcome.final_checkpoint)
}

/// Trains and evaluates every ablation variant, `parallel` at a time.
pub fn ablate(config: &RunConfig, run_dir: &Path, parallel: usize) -> Result<Vec<AblationResult>, CliError> {
    if config.ablations.is_empty() {
        return Err(ConfigError::Invalid("the ablation list is empty".into()).into());
    }
    let variants: Vec<(String, TrainConfig)> =
        config.ablations.iter().flat_map(|a: &Ablation| a.variants(&config.train, &config.sigma_g_sweep)).collect();
    if variants.is_empty() {
        return Err(ConfigError::Invalid("the ablation list expands to no runs (empty sigma_g_sweep?)".into()).into());
    }
    fs::write(run_dir.join("run.cfg"), config.to_text())?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String, CliError>>>> = variants.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallel.clamp(1, variants.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, train)) = variants.get(i) else { break };
                println!("ablation {name}: started");
                let r = run_variant(config, name, train.clone(), &run_dir.join(name));
                println!("ablation {name}: {}", if r.is_ok() { "done" } else { "failed" });
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let results: Vec<AblationResult> = variants
        .iter()
        .zip(slots)
        .map(|((name, _), slot)| AblationResult { name: name.clone(), result: slot.into_inner().unwrap().unwrap() })
        .collect();
    let mut summary = String::new();
    for r in &results {
        let _ = match &r.result {
            Ok(line) => writeln!(summary, "{line}"),
            Err(e) => writeln!(summary, "{:<18} failed: {e}", r.name),
        };
    }
    fs::write(run_dir.join("ablations.txt"), &summary)?;
    print!("{summary}");
    Ok(results)
}

fn metrics_summary(records: &[StepRecord]) -> String {
    let mut s = String::new();
    let Some(last) = records.last() else {
        return "no steps recorded\n".into();
    };
    let mean = |xs: &[StepRecord]| xs.iter().map(|r| r.total).sum::<f64>() / xs.len().max(1) as f64;
    let head = &records[..records.len().min(100)];
    let tail = &records[records.len().saturating_sub(100)..];
    let _ = writeln!(s, "steps             {}", last.step);
    let _ = writeln!(s, "total loss        {:.5} (first 100 mean) -> {:.5} (last 100 mean)", mean(head), mean(tail));
    let _ = writeln!(s, "last step         {}", log_line(last));
    let _ = writeln!(s, "non-finite        {}", records.iter().filter(|r| !r.total.is_finite()).count());
    s
}

fn collect(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

/// Digest of every metrics log and evaluation report under `run_dir`,
/// written to `summary.txt`.
pub fn report(run_dir: &Path) -> Result<String, CliError> {
    if !run_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a run directory", run_dir.display())));
    }
    let mut s = String::new();
    let (mut metrics, mut reports) = (Vec::new(), Vec::new());
    collect(run_dir, METRICS_FILE, &mut metrics)?;
    collect(run_dir, "report.json", &mut reports)?;
    for p in &metrics {
        let _ = writeln!(s, "== training {}", p.parent().unwrap_or(run_dir).display());
        s.push_str(&metrics_summary(&read_metrics(p)?));
        s.push('\n');
    }
    for p in &reports {
        let r: EvalReport = serde_json::from_reader(BufReader::new(File::open(p)?))?;
        let _ = writeln!(s, "== evaluation {}", p.parent().unwrap_or(run_dir).display());
        s.push_str(&render_text(&r));
        s.push('\n');
    }
    if metrics.is_empty() && reports.is_empty() {
        let _ = writeln!(s, "nothing to report in {}", run_dir.display());
    }
    fs::write(run_dir.join("summary.txt"), &s)?;
    Ok(s)
}
