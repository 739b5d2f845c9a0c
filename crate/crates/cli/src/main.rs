mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridssl::gridcode::IdealCode;
use gridssl::losses::PairReduction;
use gridssl::trainer::ClipMode;

use commands::{CliError, Source};
use config::{Ablation, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "gridssl", version, about = "Train and analyze self-supervised grid-cell models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or resume from a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint or an ideal grid code.
    Eval(EvalArgs),
    /// Train and evaluate each ablation variant.
    Ablate(AblateArgs),
    /// Write ratemaps and coding diagnostics of an ideal grid code.
    Oracle(OracleArgs),
    /// Summarize the metrics and reports of a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of new run directories.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Checkpoint to continue from; output goes to its run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Sum loss terms over pairs instead of averaging.
    #[arg(long)]
    raw_sums: bool,
    #[arg(long, value_enum)]
    clip_mode: Option<ClipArg>,
    /// Print every n-th step (0 silences progress).
    #[arg(long, default_value_t = 500)]
    log_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipArg {
    Value,
    Norm,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    TwoModule,
    Default,
}

impl OracleKind {
    fn code(self) -> IdealCode {
        match self {
            OracleKind::TwoModule => IdealCode::two_module_oracle(),
            OracleKind::Default => IdealCode::default_oracle(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "two-module")]
    oracle: Option<OracleKind>,
    /// Arena sides in meters, comma separated.
    #[arg(long, value_delimiter = ',')]
    arenas: Option<Vec<f64>>,
    /// Walk length per arena.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma separated variant names; the configured list when omitted.
    #[arg(long)]
    ablations: Option<String>,
    /// Variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "two-module")]
    which: OracleKind,
    /// Arena side in meters.
    #[arg(long, default_value_t = 2.0)]
    arena: f64,
    /// Bin size in meters; one hundredth of the side when omitted.
    #[arg(long)]
    bin_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    run_dir: PathBuf,
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = commands::load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn thread_limit() -> Result<Option<usize>, CliError> {
    match std::env::var("GRIDSSL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError::Invalid(format!("GRIDSSL_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_limit()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match cli.command {
        Command::Train(args) => {
            let mut config = load(&args.common)?;
            if let Some(n) = args.max_steps {
                config.train.max_steps = n;
            }
            if args.raw_sums {
                config.train.loss.reduction = PairReduction::RawSum;
            }
            if let Some(c) = args.clip_mode {
                config.train.clip_mode = match c {
                    ClipArg::Value => ClipMode::Value,
                    ClipArg::Norm => ClipMode::Norm,
                };
            }
            config.validate()?;
            let run_dir = match &args.resume {
                Some(ckpt) => commands::run_dir_of(ckpt)?,
                None => commands::new_run_dir(&args.common.out_root, config.train.seed)?,
            };
            println!("run directory {}", run_dir.display());
            commands::train(&config, &run_dir, args.resume.as_deref(), args.log_every)?;
        }
        Command::Eval(args) => {
            let mut config = load(&args.common)?;
            if let Some(a) = args.arenas {
                config.eval_arenas = a;
            }
            if let Some(s) = args.steps {
                config.eval_steps = s;
            }
            config.validate()?;
            let source = match (args.checkpoint, args.oracle) {
                (Some(path), _) => Source::Checkpoint(path),
                (None, Some(kind)) => Source::Oracle(kind.code()),
                (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --oracle".into())),
            };
            let run_dir = commands::new_run_dir(&args.common.out_root, config.train.seed)?;
            commands::eval(&config, &source, &run_dir)?;
        }
        Command::Ablate(args) => {
            let mut config = load(&args.common)?;
            if let Some(list) = &args.ablations {
                config.ablations = list
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<Ablation>)
                    .collect::<Result<_, _>>()
                    .map_err(|e: String| ConfigError::Invalid(format!("ablations: {e}")))?;
            }
            if let Some(n) = args.max_steps {
                config.train.max_steps = n;
            }
            if config.ablations.is_empty() {
                return Err(ConfigError::Invalid("the ablation list is empty".into()).into());
            }
            config.validate()?;
            let parallel = threads.map_or(args.parallel, |t| args.parallel.min(t));
            let run_dir = commands::new_run_dir(&args.common.out_root, config.train.seed)?;
            let results = commands::ablate(&config, &run_dir, parallel)?;
            if let Some(err) = results.into_iter().find_map(|r| r.result.err()) {
                return Err(err);
            }
        }
        Command::Oracle(args) => {
            let run_dir = commands::new_run_dir(&args.out_root, args.seed)?;
            let bin = args.bin_size.unwrap_or(0.01 * args.arena);
            commands::oracle(&args.which.code(), args.arena, bin, args.seed, &run_dir)?;
        }
        Command::Report(args) => print!("{}", commands::report(&args.run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
