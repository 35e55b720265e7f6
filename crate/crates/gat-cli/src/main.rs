//! `gat`: train, pseudo-label, self-train, and evaluate gaze models on
//! manifest-described datasets. Every command is seeded and writes only
//! under its `--out` directory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error,
//! 3 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::CommonArgs;

#[derive(Parser)]
#[command(name = "gat", version, about = "gaze estimation trainer and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets: fully labeled manifests in one look
    /// domain, a planar-labeled manifest in a shifted domain, and a sealed
    /// fully labeled twin of the planar set for scoring only.
    Synth(SynthArgs),
    /// Train one model stage (mode supervised or ws) and write a checkpoint.
    Train(TrainArgs),
    /// Label a planar manifest with a trained model's 3D predictions.
    Pseudolabel(PseudolabelArgs),
    /// Run the two-stage pipeline (mode st or stwsge): train, pseudo-label,
    /// retrain, and compare both stages on held-out data.
    Selftrain(SelftrainArgs),
    /// Score a checkpoint on a manifest and write per-split error tables.
    Eval(EvalArgs),
    /// Score a checkpoint across several crop scales.
    Sweep(SweepArgs),
    /// Compare analytic gradients against finite differences on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Training records in the fully labeled domain.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Planar-labeled records in the shifted domain (default: --count).
    #[arg(long)]
    pub count_2d: Option<usize>,
    /// Validation records (default: count/5 rounded up).
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Test records per domain (default: count/2 rounded up).
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Multi-frame clip records (default: count/10 rounded up).
    #[arg(long)]
    pub clip_count: Option<usize>,
    /// Frames per clip record.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Master seed; every manifest derives its own stream from it.
    #[arg(long)]
    pub seed: u64,
    /// Output directory for the manifests.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Supervision mode: supervised or ws.
    #[arg(long)]
    pub mode: String,
    /// Fully labeled manifests; repeatable.
    #[arg(long, required = true)]
    pub manifest_3d: Vec<PathBuf>,
    /// Planar-labeled manifest (required by --mode ws).
    #[arg(long)]
    pub manifest_2d: Option<PathBuf>,
    /// Validation manifest for model selection.
    #[arg(long)]
    pub val: PathBuf,
    /// How 3D records enter training: i (image), v (video), or iv.
    #[arg(long, default_value = "i")]
    pub view_3d: String,
    /// How 2D records enter training: i, v, or iv.
    #[arg(long, default_value = "i")]
    pub view_2d: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct PseudolabelArgs {
    /// Trained checkpoint that predicts the labels.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Planar-labeled manifest to relabel.
    #[arg(long)]
    pub manifest_2d: PathBuf,
    /// rotate: align predictions with the planar annotation;
    /// raw: keep predictions as labels and ignore the annotation.
    #[arg(long, default_value = "rotate")]
    pub policy: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct SelftrainArgs {
    /// Pipeline mode: stwsge (rotate predictions onto annotations) or
    /// st (keep raw predictions as labels).
    #[arg(long)]
    pub mode: String,
    /// Fully labeled manifests; repeatable.
    #[arg(long, required = true)]
    pub manifest_3d: Vec<PathBuf>,
    /// Planar-labeled manifest to pseudo-label between stages.
    #[arg(long)]
    pub manifest_2d: PathBuf,
    /// Validation manifest for model selection in both stages.
    #[arg(long)]
    pub val: PathBuf,
    /// Held-out manifest for the stage comparison (default: --val).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// How 3D records enter training: i, v, or iv.
    #[arg(long, default_value = "i")]
    pub view_3d: String,
    /// How pseudo-labeled records enter stage-two training: i, v, or iv.
    #[arg(long, default_value = "i")]
    pub view_2d: String,
    /// Initialize stage two from the stage-one weights instead of fresh.
    #[arg(long)]
    pub warm_start: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to score on.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to score on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated crop scales, e.g. "-0.1,0,0.3".
    #[arg(long, allow_hyphen_values = true)]
    pub scales: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Coordinates to probe, spread over every parameter tensor.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    /// Seed for the probe inputs and parameter draw.
    #[arg(long)]
    pub seed: u64,
    /// Output directory for the verdict file.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional config file overriding the built-in small model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run(cli: &Cli) -> Result<(), config::CliError> {
    match &cli.command {
        Command::Synth(args) => commands::cmd_synth(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Pseudolabel(args) => commands::cmd_pseudolabel(args),
        Command::Selftrain(args) => commands::cmd_selftrain(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Sweep(args) => commands::cmd_sweep(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap renders help to stdout and errors to stderr on its own.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}
