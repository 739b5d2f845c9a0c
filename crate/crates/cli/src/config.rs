//! Flat `key = value` run configuration. Every key must appear exactly once;
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use gridssl::losses::{LossConfig, PairReduction};
use gridssl::trainer::{AdamConfig, ClipMode, SchedulerConfig, TrainConfig};
use gridssl::trajectory::{EvalWalk, VelocityDist};
use gridssl::Precision;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: config key `{key}` given twice")]
    DuplicateKey { key: String, line: usize },
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("line {line}: invalid value for `{key}`: {message}")]
    Value { key: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// One configuration of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoCapacity,
    SigmaGSweep,
    NoSeparation,
    NoInvariance,
    NoPermutation,
    /// Separation kernel `exp(−‖Δg‖²)` without the `2σ_g²` scale.
    NoSigmaGNorm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoCapacity,
        Ablation::SigmaGSweep,
        Ablation::NoSeparation,
        Ablation::NoInvariance,
        Ablation::NoPermutation,
        Ablation::NoSigmaGNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCapacity => "no-capacity",
            Ablation::SigmaGSweep => "sigma-g-sweep",
            Ablation::NoSeparation => "no-separation",
            Ablation::NoInvariance => "no-invariance",
            Ablation::NoPermutation => "no-permutation",
            Ablation::NoSigmaGNorm => "no-sigma-g-norm",
        }
    }

    /// Named training configurations derived from `base`.
    pub fn variants(self, base: &TrainConfig, sigma_g_sweep: &[f64]) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            vec![(self.name().to_string(), c)]
        };
        match self {
            Ablation::NoCapacity => with(&|c| c.loss.lambda_cap = 0.0),
            Ablation::NoSeparation => with(&|c| c.loss.lambda_sep = 0.0),
            Ablation::NoInvariance => with(&|c| c.loss.lambda_inv = 0.0),
            Ablation::NoPermutation => with(&|c| c.permute = false),
            Ablation::NoSigmaGNorm => with(&|c| c.loss.sigma_g = std::f64::consts::FRAC_1_SQRT_2),
            Ablation::SigmaGSweep => sigma_g_sweep
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.loss.sigma_g = s;
                    (format!("sigma-g-{s}"), c)
                })
                .collect(),
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of {}", Ablation::ALL.map(Ablation::name).join(", ")))
    }
}

impl Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Square arena sides evaluated, meters.
    pub eval_arenas: Vec<f64>,
    /// `None` scales the bin with the arena.
    pub eval_bin_size: Option<f64>,
    pub eval_steps: usize,
    pub eval_min_occupancy: u32,
    pub eval_walk: EvalWalk,
    pub ablations: Vec<Ablation>,
    pub sigma_g_sweep: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            eval_arenas: vec![2.0, 3.0, 4.0],
            eval_bin_size: None,
            eval_steps: 1_000_000,
            eval_min_occupancy: 10,
            eval_walk: EvalWalk::default(),
            ablations: Ablation::ALL.to_vec(),
            sigma_g_sweep: vec![0.2, 0.1],
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if map.insert(key.to_string(), (line, value.trim().to_string())).is_some() {
                return Err(ConfigError::DuplicateKey { key: key.to_string(), line });
            }
        }
        Ok(Entries { map })
    }

    fn raw(&mut self, key: &str) -> Result<(usize, String), ConfigError> {
        self.map.remove(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let (line, v) = self.raw(key)?;
        v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.to_string(), line, message: e.to_string() })
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        let (line, v) = self.raw(key)?;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| ConfigError::Value { key: key.to_string(), line, message: e.to_string() }))
            .collect()
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().next() {
            Some((key, (line, _))) => Err(ConfigError::UnknownKey { key, line }),
            None => Ok(()),
        }
    }
}

fn reduction_name(r: PairReduction) -> &'static str {
    match r {
        PairReduction::Mean => "mean",
        PairReduction::RawSum => "raw-sum",
    }
}

fn parse_reduction(s: &str) -> Result<PairReduction, String> {
    match s {
        "mean" => Ok(PairReduction::Mean),
        "raw-sum" => Ok(PairReduction::RawSum),
        _ => Err(format!("expected mean or raw-sum, got {s:?}")),
    }
}

fn clip_name(c: ClipMode) -> &'static str {
    match c {
        ClipMode::Value => "value",
        ClipMode::Norm => "norm",
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;
        let (rline, reduction) = e.raw("reduction")?;
        let reduction =
            parse_reduction(&reduction).map_err(|message| ConfigError::Value { key: "reduction".into(), line: rline, message })?;
        let (bline, bin) = e.raw("eval_bin_size")?;
        let eval_bin_size = match bin.as_str() {
            "auto" => None,
            v => Some(v.parse().map_err(|err: std::num::ParseFloatError| ConfigError::Value {
                key: "eval_bin_size".into(),
                line: bline,
                message: err.to_string(),
            })?),
        };
        let train = TrainConfig {
            units: e.get("units")?,
            hidden: e.get("hidden")?,
            layers: e.get("layers")?,
            train_g0: e.get("train_g0")?,
            norm_eps: e.get("norm_eps")?,
            batch_size: e.get("batch_size")?,
            seq_len: e.get("seq_len")?,
            velocity: VelocityDist::Uniform { low: e.get("velocity_low")?, high: e.get("velocity_high")? },
            permute: e.get("permute")?,
            loss: LossConfig {
                sigma_x: e.get("sigma_x")?,
                sigma_g: e.get("sigma_g")?,
                lambda_sep: e.get("lambda_sep")?,
                lambda_inv: e.get("lambda_inv")?,
                lambda_cap: e.get("lambda_cap")?,
                lambda_coniso: e.get("lambda_coniso")?,
                reduction,
            },
            learning_rate: e.get("learning_rate")?,
            adam: AdamConfig {
                beta1: e.get("adam_beta1")?,
                beta2: e.get("adam_beta2")?,
                eps: e.get("adam_eps")?,
                weight_decay: e.get("weight_decay")?,
            },
            clip_mode: e.get("clip_mode")?,
            clip_value: e.get("clip_value")?,
            accumulate_batches: e.get("accumulate_batches")?,
            max_steps: e.get("max_steps")?,
            scheduler: SchedulerConfig {
                factor: e.get("scheduler_factor")?,
                patience: e.get("scheduler_patience")?,
                threshold: e.get("scheduler_threshold")?,
                lr_min: e.get("scheduler_lr_min")?,
            },
            seed: e.get("seed")?,
            checkpoint_every: e.get("checkpoint_every")?,
            precision: e.get("precision")?,
        };
        let config = RunConfig {
            train,
            eval_arenas: e.list("eval_arenas")?,
            eval_bin_size,
            eval_steps: e.get("eval_steps")?,
            eval_min_occupancy: e.get("eval_min_occupancy")?,
            eval_walk: EvalWalk { smoothness: e.get("eval_walk_smoothness")?, speed: e.get("eval_walk_speed")? },
            ablations: e.list("ablations")?,
            sigma_g_sweep: e.list("sigma_g_sweep")?,
        };
        e.finish()?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval_arenas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(ConfigError::Invalid("eval_arenas must be positive".into()));
        }
        if self.eval_bin_size.is_some_and(|b| !(b > 0.0)) {
            return Err(ConfigError::Invalid("eval_bin_size must be positive or auto".into()));
        }
        if self.sigma_g_sweep.iter().any(|&s| !(s > 0.0)) {
            return Err(ConfigError::Invalid("sigma_g_sweep values must be positive".into()));
        }
        Ok(())
    }

    /// Complete config file text; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let VelocityDist::Uniform { low, high } = t.velocity;
        let precision = match t.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("units", &t.units);
        kv("hidden", &t.hidden);
        kv("layers", &t.layers);
        kv("train_g0", &t.train_g0);
        kv("norm_eps", &t.norm_eps);
        kv("precision", &precision);
        kv("batch_size", &t.batch_size);
        kv("seq_len", &t.seq_len);
        kv("velocity_low", &low);
        kv("velocity_high", &high);
        kv("permute", &t.permute);
        kv("sigma_x", &t.loss.sigma_x);
        kv("sigma_g", &t.loss.sigma_g);
        kv("lambda_sep", &t.loss.lambda_sep);
        kv("lambda_inv", &t.loss.lambda_inv);
        kv("lambda_cap", &t.loss.lambda_cap);
        kv("lambda_coniso", &t.loss.lambda_coniso);
        kv("reduction", &reduction_name(t.loss.reduction));
        kv("learning_rate", &t.learning_rate);
        kv("adam_beta1", &t.adam.beta1);
        kv("adam_beta2", &t.adam.beta2);
        kv("adam_eps", &t.adam.eps);
        kv("weight_decay", &t.adam.weight_decay);
        kv("clip_mode", &clip_name(t.clip_mode));
        kv("clip_value", &t.clip_value);
        kv("accumulate_batches", &t.accumulate_batches);
        kv("max_steps", &t.max_steps);
        kv("scheduler_factor", &t.scheduler.factor);
        kv("scheduler_patience", &t.scheduler.patience);
        kv("scheduler_threshold", &t.scheduler.threshold);
        kv("scheduler_lr_min", &t.scheduler.lr_min);
        kv("checkpoint_every", &t.checkpoint_every);
        kv("seed", &t.seed);
        kv("eval_arenas", &join(&self.eval_arenas));
        kv("eval_bin_size", &self.eval_bin_size.map_or("auto".to_string(), |b| b.to_string()));
        kv("eval_steps", &self.eval_steps);
        kv("eval_min_occupancy", &self.eval_min_occupancy);
        kv("eval_walk_smoothness", &self.eval_walk.smoothness);
        kv("eval_walk_speed", &self.eval_walk.speed);
        kv("ablations", &join(&self.ablations));
        kv("sigma_g_sweep", &join(&self.sigma_g_sweep));
        s
    }
}
