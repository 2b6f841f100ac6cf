mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use atriaseg::augment::CurriculumSchedule;
use atriaseg::{ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

use commands::RunFlags;
use config::{default_out, RunConfig};

/// Left-atrium segmentation and pre/post-ablation classification.
#[derive(Parser)]
#[command(name = "atriaseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a model or a bagged ensemble.
    Train(TrainArgs),
    /// Predict masks and ablation labels for every case of a manifest.
    Infer(InferArgs),
    /// Score prediction directories against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $ATRIASEG_OUTPUT_ROOT/<command> or runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train at a single crop size for every epoch instead of the curriculum.
    #[arg(long)]
    crop: Option<usize>,
    /// `--multitask=false` drops the classification loss.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    multitask: Option<bool>,
    /// Train N models on bootstrap resamples.
    #[arg(long, value_name = "N")]
    bagging: Option<usize>,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    strict_repro: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint file or training directory; repeat for an ensemble.
    #[arg(long = "checkpoint", value_name = "PATH")]
    checkpoints: Vec<PathBuf>,
    /// Threshold only, without closing and largest-component filtering.
    #[arg(long)]
    no_postproc: bool,
    #[arg(long)]
    strict_repro: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Prediction directory; repeat to compare several side by side.
    #[arg(long = "pred", value_name = "DIR")]
    predictions: Vec<PathBuf>,
    /// Row label for the matching --pred.
    #[arg(long = "label")]
    labels: Vec<String>,
}

fn base(common: &Common, command: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    if cfg.paths.out.is_none() {
        cfg.paths.out = Some(default_out(command));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = base(&a.common, "synth")?;
            if let Some(n) = a.cases {
                cfg.synth.n_cases = n;
            }
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            let flags = RunFlags {
                force: a.force,
                ..Default::default()
            };
            commands::synth(&cfg, &flags).map(|_| ())
        }
        Command::Train(a) => {
            let mut cfg = base(&a.common, "train")?;
            if let Some(m) = a.manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(c) = a.crop {
                cfg.train.curriculum = CurriculumSchedule::single(c, cfg.train.epochs);
            }
            if a.multitask == Some(false) {
                cfg.train.lambda = 0.0;
            }
            if a.bagging.is_some() {
                cfg.bagging = a.bagging;
            }
            let flags = RunFlags {
                force: a.force,
                resume: a.resume,
                workers: a.workers,
                strict_repro: a.strict_repro,
                quiet: a.quiet,
            };
            commands::train(&cfg, &flags).map(|_| ())
        }
        Command::Infer(a) => {
            let mut cfg = base(&a.common, "infer")?;
            if let Some(m) = a.manifest {
                cfg.paths.manifest = Some(m);
            }
            if !a.checkpoints.is_empty() {
                cfg.paths.checkpoints = a.checkpoints;
            }
            if a.no_postproc {
                cfg.infer.apply_postprocess = false;
            }
            let flags = RunFlags {
                strict_repro: a.strict_repro,
                ..Default::default()
            };
            commands::infer(&cfg, &flags)
        }
        Command::Evaluate(a) => {
            let mut cfg = base(&a.common, "evaluate")?;
            if let Some(m) = a.manifest {
                cfg.paths.manifest = Some(m);
            }
            if !a.predictions.is_empty() {
                cfg.paths.predictions = a.predictions;
                cfg.paths.labels = a.labels;
            } else if !a.labels.is_empty() {
                cfg.paths.labels = a.labels;
            }
            commands::evaluate(&cfg).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Runtime => 4,
            })
        }
    }
}
