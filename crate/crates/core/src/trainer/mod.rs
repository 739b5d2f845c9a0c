//! Optimization loop: gradient accumulation, clipping, AdamW, plateau
//! scheduling, checkpoints and the per-step metrics log.
//!
//! A *step* is one optimizer update and consumes `accumulate_batches`
//! micro-batches. Micro-batch `k` of a run is sampled from its own ChaCha
//! stream derived from `(seed, k)`, so resuming needs no RNG state.

mod optim;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{clip_gradients, AdamConfig, ClipMode, OptimizerState, PlateauScheduler, SchedulerConfig};

use crate::autodiff::{AutodiffError, Tape};
use crate::io::{read_f64, read_f64s, read_magic, read_u32, read_u64, write_f64s, BinaryError};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{unroll_batch, ModelError, ModelParams, NormMode};
use crate::trajectory::{build_pair_masks, sample_batch, sample_independent_batch, PairMask, TrajectoryBatch, VelocityDist};
use crate::{Precision, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step} (seed {seed}, micro-batch {batch_index})")]
    NonFinite { what: &'static str, step: u64, seed: u64, batch_index: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Binary(#[from] BinaryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub units: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Whether the initial state is optimized along with the MLP.
    pub train_g0: bool,
    /// ε in `ReLU(x) / (‖ReLU(x)‖ + ε)`.
    pub norm_eps: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub velocity: VelocityDist,
    /// Replay one velocity sequence under `B` permutations (otherwise `B`
    /// independent sequences).
    pub permute: bool,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub clip_mode: ClipMode,
    pub clip_value: f64,
    pub accumulate_batches: usize,
    pub max_steps: u64,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            units: 128,
            hidden: 256,
            layers: 3,
            train_g0: false,
            norm_eps: 1e-8,
            batch_size: 130,
            seq_len: 60,
            velocity: VelocityDist::default(),
            permute: true,
            loss: LossConfig::default(),
            learning_rate: 2e-5,
            adam: AdamConfig::default(),
            clip_mode: ClipMode::Value,
            clip_value: 0.1,
            accumulate_batches: 2,
            max_steps: 2_000_000,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            checkpoint_every: 10_000,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Small configuration used for the smoke run.
    pub fn smoke() -> Self {
        TrainConfig { units: 64, batch_size: 32, seq_len: 30, max_steps: 20_000, checkpoint_every: 5_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_value > 0.0) {
            return bad("clip_value must be positive");
        }
        if self.accumulate_batches == 0 {
            return bad("accumulate_batches must be at least 1");
        }
        if self.units == 0 || self.layers == 0 || (self.layers > 1 && self.hidden == 0) {
            return bad("units, hidden and layers must be positive");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        if !(self.adam.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("invalid AdamW hyperparameters");
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || !(s.threshold >= 0.0) || !(s.lr_min >= 0.0) {
            return bad("invalid scheduler hyperparameters");
        }
        let VelocityDist::Uniform { low, high } = self.velocity;
        if !(low < high) {
            return bad("velocity range must be non-empty");
        }
        self.loss.validate().map_err(TrainError::Config)
    }
}

/// A micro-batch together with its pair classification.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// Position of the micro-batch in the run.
    pub index: u64,
    pub batch: TrajectoryBatch,
    pub mask: Arc<PairMask>,
}

/// RNG for micro-batch `index` of a run with `seed`.
pub fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn prepare_batch(config: &TrainConfig, index: u64) -> PreparedBatch {
    let mut rng = batch_rng(config.seed, index);
    let batch = if config.permute {
        sample_batch(config.seq_len, config.batch_size, &mut rng, &config.velocity)
    } else {
        sample_independent_batch(config.seq_len, config.batch_size, &mut rng, &config.velocity)
    };
    let mask = Arc::new(build_pair_masks(&batch, config.loss.sigma_x));
    PreparedBatch { index, batch, mask }
}

/// Loss and gradients for one micro-batch, in the order of
/// [`ModelParams::tensors`] followed by `g₀` when it is trained.
pub fn batch_gradients<S: Scalar>(
    params: &ModelParams<S>,
    batch: &TrajectoryBatch,
    mask: &Arc<PairMask>,
    loss: &LossConfig,
    norm_eps: f64,
    train_g0: bool,
) -> Result<(Vec<Vec<S>>, LossBreakdown), ModelError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, train_g0);
    let states = unroll_batch(&mut tape, &vars, batch, NormMode::Epsilon(S::of(norm_eps)))?;
    let lv = total_loss(&mut tape, states.all, vars.g0, batch, mask, loss)?;
    let breakdown = lv.breakdown(&tape);
    let mut grads = tape.backward(lv.total)?;
    let mut out: Vec<Vec<S>> = vars.tensors().into_iter().map(|v| grads.take(v).into_data()).collect();
    if train_g0 {
        out.push(grads.take(vars.g0).into_data());
    }
    Ok((out, breakdown))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    /// Optimizer steps completed, including this one.
    pub step: u64,
    /// Learning rate used for this update.
    pub lr: f64,
    pub sep: f64,
    pub inv: f64,
    pub cap: f64,
    pub coniso: f64,
    pub total: f64,
    pub far_pairs: usize,
    pub near_pairs: usize,
    pub qualifying_steps: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Model, optimizer and scheduler state of a run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub params: ModelParams<S>,
    pub opt: OptimizerState<S>,
    pub scheduler: PlateauScheduler,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, params: ModelParams<S>) -> Result<Self, TrainError> {
        config.validate()?;
        if params.units() != config.units
            || params.layers().len() != config.layers
            || (config.layers > 1 && params.hidden() != config.hidden)
        {
            return Err(TrainError::Config("model dimensions do not match the configuration".into()));
        }
        let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        if config.train_g0 {
            sizes.push(config.units);
        }
        let opt = OptimizerState::new(&sizes, config.learning_rate);
        let scheduler = PlateauScheduler::new(config.scheduler);
        Ok(Trainer { config, params, opt, scheduler })
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn from_seed(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ModelParams::init(config.units, config.hidden, config.layers, &mut init_rng(config.seed))?;
        Self::new(config, params)
    }

    /// Optimizer steps completed.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Index of the first micro-batch of the next step.
    pub fn next_batch_index(&self) -> u64 {
        self.opt.step * self.config.accumulate_batches as u64
    }

    /// One optimizer update from `accumulate_batches` micro-batches:
    /// average their gradients, clip, apply AdamW, then feed the mean total
    /// loss to the scheduler.
    pub fn train_step(&mut self, micro: &[PreparedBatch]) -> Result<StepRecord, TrainError> {
        if micro.len() != self.config.accumulate_batches {
            return Err(TrainError::Config(format!("expected {} micro-batches, got {}", self.config.accumulate_batches, micro.len())));
        }
        let step = self.opt.step + 1;
        let mut acc: Option<Vec<Vec<S>>> = None;
        let mut sums = LossBreakdown::default();
        for mb in micro {
            let abort = |what| TrainError::NonFinite { what, step, seed: self.config.seed, batch_index: mb.index };
            let (g, bd) =
                match batch_gradients(&self.params, &mb.batch, &mb.mask, &self.config.loss, self.config.norm_eps, self.config.train_g0) {
                    Ok(r) => r,
                    Err(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => return Err(abort("forward value")),
                    Err(e) => return Err(e.into()),
                };
            if !bd.total.is_finite() {
                return Err(abort("loss"));
            }
            if g.iter().flatten().any(|x| !x.is_finite()) {
                return Err(abort("gradient"));
            }
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().flatten().zip(g.iter().flatten()) {
                        *x = *x + *y;
                    }
                }
            }
            sums.sep += bd.sep;
            sums.inv += bd.inv;
            sums.cap += bd.cap;
            sums.coniso += bd.coniso;
            sums.total += bd.total;
            sums.far_pairs += bd.far_pairs;
            sums.near_pairs += bd.near_pairs;
            sums.qualifying_steps += bd.qualifying_steps;
        }
        let mut grads = acc.expect("accumulate_batches >= 1");
        let k = micro.len() as f64;
        let inv_k = S::of(1.0 / k);
        for x in grads.iter_mut().flatten() {
            *x = *x * inv_k;
        }
        let grad_norm = clip_gradients(&mut grads, self.config.clip_mode, S::of(self.config.clip_value)).to_f64_lossless();

        let lr = self.opt.lr;
        self.apply_update(&grads);
        let total = sums.total / k;
        self.opt.lr = self.scheduler.observe(total, lr);
        Ok(StepRecord {
            step,
            lr,
            sep: sums.sep / k,
            inv: sums.inv / k,
            cap: sums.cap / k,
            coniso: sums.coniso / k,
            total,
            far_pairs: sums.far_pairs,
            near_pairs: sums.near_pairs,
            qualifying_steps: sums.qualifying_steps,
            grad_norm,
        })
    }

    fn apply_update(&mut self, grads: &[Vec<S>]) {
        let train_g0 = self.config.train_g0;
        let mut g0 = self.params.g0().to_vec();
        {
            let mut slices: Vec<&mut [S]> = self.params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
            if train_g0 {
                slices.push(g0.as_mut_slice());
            }
            self.opt.update(&mut slices, grads, &self.config.adam);
        }
        if train_g0 {
            // project back onto the nonnegative unit sphere; keep the old
            // state if the update left nothing positive
            if let Ok(p) = crate::model::norm_relu(&g0) {
                self.params.set_g0(p).expect("projected state is valid");
            }
        }
    }

    /// Writes the model checkpoint and its sibling `.opt` file.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.params.write_checkpoint(BufWriter::new(File::create(path)?))?;
        let mut w = BufWriter::new(File::create(opt_path(path))?);
        self.write_opt_state(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn load(config: TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let params = ModelParams::<S>::read_checkpoint(BufReader::new(File::open(path)?))?;
        let mut trainer = Self::new(config, params)?;
        trainer.read_opt_state(BufReader::new(File::open(opt_path(path))?))?;
        Ok(trainer)
    }

    fn write_opt_state<W: Write>(&self, w: &mut W) -> Result<(), BinaryError> {
        w.write_all(OPT_MAGIC)?;
        for v in [OPT_VERSION, S::BYTES as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.opt.step.to_le_bytes())?;
        w.write_all(&self.opt.lr.to_le_bytes())?;
        w.write_all(&[u8::from(self.scheduler.best.is_some())])?;
        w.write_all(&self.scheduler.best.unwrap_or(0.0).to_le_bytes())?;
        w.write_all(&self.scheduler.bad_steps.to_le_bytes())?;
        w.write_all(&(self.opt.m.len() as u32).to_le_bytes())?;
        for (m, v) in self.opt.m.iter().zip(&self.opt.v) {
            w.write_all(&(m.len() as u64).to_le_bytes())?;
            write_f64s(w, &m.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>())?;
            write_f64s(w, &v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>())?;
        }
        Ok(())
    }

    fn read_opt_state<R: Read>(&mut self, mut r: R) -> Result<(), BinaryError> {
        read_magic(&mut r, OPT_MAGIC)?;
        let version = read_u32(&mut r)?;
        if version != OPT_VERSION {
            return Err(BinaryError::Version { found: version, expected: OPT_VERSION });
        }
        let bytes = read_u32(&mut r)?;
        if bytes as usize != S::BYTES {
            return Err(BinaryError::Malformed(format!("optimizer state saved with {bytes}-byte scalars")));
        }
        let step = read_u64(&mut r)?;
        let lr = read_f64(&mut r)?;
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let best = read_f64(&mut r)?;
        let bad_steps = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        if count != self.opt.m.len() {
            return Err(BinaryError::Malformed(format!("{count} moment tensors, expected {}", self.opt.m.len())));
        }
        for k in 0..count {
            let n = read_u64(&mut r)? as usize;
            if n != self.opt.m[k].len() {
                return Err(BinaryError::Malformed(format!("moment tensor {k} has {n} values")));
            }
            self.opt.m[k] = read_f64s(&mut r, n)?.into_iter().map(S::of).collect();
            self.opt.v[k] = read_f64s(&mut r, n)?.into_iter().map(S::of).collect();
        }
        self.opt.step = step;
        self.opt.lr = lr;
        self.scheduler.best = (flag[0] != 0).then_some(best);
        self.scheduler.bad_steps = bad_steps;
        Ok(())
    }
}

const OPT_MAGIC: &[u8; 4] = b"GSOS";
const OPT_VERSION: u32 = 1;

/// Sibling optimizer-state path of a checkpoint.
pub fn opt_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("opt")
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:08}.gsck"))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const ABORT_FILE: &str = "abort.json";

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last: Option<StepRecord>,
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Runs (or resumes) training into `out_dir`, writing `config.json`,
/// `metrics.jsonl` and `checkpoints/step-<k>.gsck` with sibling `.opt`
/// files. A non-finite loss writes `abort.json` and returns
/// [`TrainError::NonFinite`]. `on_step` sees every record.
pub fn run_training<S: Scalar>(
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::<S>::load(config.clone(), ckpt)?;
            truncate_metrics(&metrics_path, t.step())?;
            t
        }
        None => {
            let t = Trainer::<S>::from_seed(config.clone())?;
            File::create(&metrics_path)?;
            t.save(&checkpoint_path(out_dir, 0))?;
            t
        }
    };
    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_path)?);
    let mut last_ckpt = (trainer.step() > 0 || resume.is_none()).then(|| checkpoint_path(out_dir, trainer.step()));
    if let Some(p) = resume {
        last_ckpt = Some(p.to_path_buf());
    }
    let mut last = None;

    let start = trainer.step();
    let accum = config.accumulate_batches as u64;
    let remaining = config.max_steps.saturating_sub(start);
    let first_batch = start * accum;
    let result: Result<(), TrainError> = std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<PreparedBatch>(2);
        let producer_cfg = config.clone();
        scope.spawn(move || {
            for i in first_batch..first_batch + remaining * accum {
                if tx.send(prepare_batch(&producer_cfg, i)).is_err() {
                    break;
                }
            }
        });
        for _ in 0..remaining {
            let micro: Vec<PreparedBatch> = (0..accum).map(|_| rx.recv().expect("batch producer stopped")).collect();
            let record = match trainer.train_step(&micro) {
                Ok(r) => r,
                Err(e) => {
                    if let TrainError::NonFinite { what, step, seed, batch_index } = &e {
                        let dump = serde_json::json!({
                            "what": what, "step": step, "seed": seed, "batch_index": batch_index,
                        });
                        fs::write(out_dir.join(ABORT_FILE), serde_json::to_string_pretty(&dump)?)?;
                    }
                    return Err(e);
                }
            };
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n")?;
            on_step(&record);
            let step = record.step;
            last = Some(record);
            if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) || step == config.max_steps {
                log.flush()?;
                let p = checkpoint_path(out_dir, step);
                trainer.save(&p)?;
                last_ckpt = Some(p);
            }
        }
        Ok(())
    });
    log.flush()?;
    result?;
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let p = checkpoint_path(out_dir, trainer.step());
            trainer.save(&p)?;
            p
        }
    };
    Ok(RunOutcome { final_checkpoint, steps: trainer.step(), last })
}

/// Drops records after `step` so a resumed run continues the log exactly.
fn truncate_metrics(path: &Path, step: u64) -> Result<(), TrainError> {
    if !path.exists() {
        File::create(path)?;
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}
