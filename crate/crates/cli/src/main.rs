//! `mrbd` — command-line front end for the training framework: dataset
//! preparation, the five training strategies, metric evaluation, ablations,
//! robustness sweeps, and replayable run reports.
//!
//! Every command is deterministic given its config and seed: rerunning
//! writes byte-identical CSV/JSON/checkpoints (wall-clock timing goes to a
//! separate `timing.csv`). Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Training builds and frees millions of short-lived tape tensors; a
/// thread-caching allocator recovers a large share of that overhead.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use commands::{ablate, evaluate, prepare, replay, sweep, train, CmdResult};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mrbd",
    version,
    about = "Sharded student groups with bidirectional mutual distillation, at desk scale",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset directory: pair files, vocabulary, split manifest.
    Prepare(PrepareArgs),
    /// Train a strategy; write checkpoints, the log CSV, and a run report.
    #[command(after_long_help = config::schema_help())]
    Train(TrainArgs),
    /// Score a checkpoint on the test split (NLL, Dist, Ent, Dis).
    #[command(after_long_help = config::schema_help())]
    Evaluate(EvaluateArgs),
    /// Retrain across one ablation axis and tabulate test metrics.
    #[command(after_long_help = config::schema_help())]
    Ablate(AblateArgs),
    /// Robustness sweeps: label-noise retraining or parameter perturbation.
    #[command(after_long_help = config::schema_help())]
    Sweep(SweepArgs),
    /// Show a run report or replay it and verify byte-identical artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset directory to create.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// TAB-separated pair file (one `history<TAB>response` per line).
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic",
          conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate the synthetic template corpus instead of reading a file.
    #[arg(long)]
    synthetic: bool,
    /// Split line counts.
    #[arg(long, value_name = "TRAIN,VALID,TEST", default_value = "200,40,40")]
    sizes: String,
    /// Root seed for the generator / split shuffle.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Vocabulary cap, reserved tokens included.
    #[arg(long, value_name = "N", default_value_t = 512)]
    vocab_cap: usize,
    /// Off-template response rate in the synthetic train split.
    #[arg(long, value_name = "RATE", default_value_t = 0.0, requires = "synthetic")]
    noise: f64,
    /// How many templates of the bank to use (0 = all).
    #[arg(long, value_name = "N", default_value_t = 0, requires = "synthetic")]
    templates: usize,
}

/// Flags shared by every config-driven command. Precedence, lowest to
/// highest: defaults, --config file, --set overrides, dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file (see the README schema).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Prepared dataset directory (config key `data_dir`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Root seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (config key `threads`).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Training strategy (config key `strategy`).
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint to score (config key `checkpoint`).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Ablation axis.
    #[arg(long, value_enum)]
    axis: ablate::Axis,
    /// Comma-separated axis values (defaults per axis).
    #[arg(long)]
    values: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Sweep mode.
    #[arg(long, value_enum)]
    mode: sweep::Mode,
    /// σ grid for --mode perturb (config key `sigmas`).
    #[arg(long)]
    sigmas: Option<String>,
    /// Trials per σ (config key `trials`).
    #[arg(long)]
    trials: Option<usize>,
    /// Noise fractions for --mode noise (config key `fractions`).
    #[arg(long)]
    fractions: Option<String>,
    /// Trained checkpoint for --mode perturb (config key `checkpoint`).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(subcommand)]
    action: ReportAction,
}

#[derive(Subcommand)]
enum ReportAction {
    /// Print a run report.
    Show {
        /// Path to a report.json.
        #[arg(value_name = "REPORT")]
        path: PathBuf,
    },
    /// Re-run the reported command and verify artifacts are byte-identical.
    Replay {
        /// Path to a report.json.
        #[arg(value_name = "REPORT")]
        path: PathBuf,
        /// Fresh directory for the replayed artifacts.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse(); // clap exits 2 on usage errors, 0 on --help
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.exit);
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Prepare(a) => prepare::run(&prepare::PrepareParams {
            out_dir: a.out_dir,
            input: a.input,
            sizes: a.sizes,
            seed: a.seed,
            vocab_cap: a.vocab_cap,
            noise: a.noise,
            templates: a.templates,
        }),
        Command::Train(a) => {
            let cfg = resolve(&a.common, &[("strategy", a.strategy.clone())])?;
            train::run(&cfg, &a.common.out_dir)
        }
        Command::Evaluate(a) => {
            let ckpt = a.checkpoint.as_ref().map(|p| p.display().to_string());
            let cfg = resolve(&a.common, &[("checkpoint", ckpt)])?;
            evaluate::run(&cfg, &a.common.out_dir)
        }
        Command::Ablate(a) => {
            let cfg = resolve(&a.common, &[])?;
            ablate::run(&cfg, &a.common.out_dir, a.axis, a.values.as_deref())
        }
        Command::Sweep(a) => {
            let ckpt = a.checkpoint.as_ref().map(|p| p.display().to_string());
            let cfg = resolve(
                &a.common,
                &[
                    ("sigmas", a.sigmas.clone()),
                    ("trials", a.trials.map(|t| t.to_string())),
                    ("fractions", a.fractions.clone()),
                    ("checkpoint", ckpt),
                ],
            )?;
            sweep::run(&cfg, &a.common.out_dir, a.mode)
        }
        Command::Report(a) => match a.action {
            ReportAction::Show { path } => replay::show(&path),
            ReportAction::Replay { path, out_dir } => replay::replay(&path, &out_dir),
        },
    }
}

/// Layer the config sources: file, then --set pairs, then dedicated flags.
fn resolve(common: &ConfigArgs, extra: &[(&str, Option<String>)]) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_sets(&common.set)?;
    if let Some(dir) = &common.data {
        cfg.set("data_dir", &dir.display().to_string())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = common.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    for (key, value) in extra {
        if let Some(value) = value {
            cfg.set(key, value)?;
        }
    }
    Ok(cfg)
}
