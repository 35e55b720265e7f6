//! Run configuration and the exit-code contract.
//!
//! Every run is described by flags merged over an optional JSON config
//! file; a flag always wins over the file, and built-in defaults fill
//! whatever neither provides. Referenced input paths are checked before
//! any work starts, so failures at that point are configuration errors,
//! not I/O errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gat::checkpoint::CheckpointError;
use gat::eval::EvalError;
use gat::manifest::{ManifestError, ModalityView};
use gat::model::ModelConfig;
use gat::optim::OptimizerConfig;
use gat::ppm::PpmError;
use gat::train::{TrainError, TrainOptions};

/// Process outcome: 0 success, 1 configuration error, 2 I/O error,
/// 3 numeric divergence.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Diverged(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> CliError {
        match e {
            ManifestError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::Io(format!("checkpoint: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::Frames(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Frames(_) => CliError::Io(e.to_string()),
            TrainError::Eval(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PpmError> for CliError {
    fn from(e: PpmError) -> CliError {
        CliError::Io(e.to_string())
    }
}

/// Optional JSON config file. Unknown keys are rejected so typos fail
/// loudly instead of silently falling back to defaults.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub optimizer: Option<OptimizerConfig>,
    pub augment: Option<bool>,
    pub temporal_weights: Option<Vec<f64>>,
    pub clip_len: Option<usize>,
    pub crop_scale: Option<f64>,
    pub size: Option<usize>,
    pub workers: Option<usize>,
}

/// Errors unless `path` names an existing file, blaming `flag`.
pub fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{flag}: no such file: {}", path.display())))
    }
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    require_file(path, "--config")?;
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))
}

/// Flags shared by every command that trains or scores a model.
#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Optional JSON config file; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file
    #[arg(long)]
    pub out: PathBuf,
    /// Run seed; initialization, sampling, and augmentation derive from it
    #[arg(long)]
    pub seed: u64,
    /// Training length in epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Data-pipeline threads; results do not depend on the count
    #[arg(long)]
    pub workers: Option<usize>,
    /// Frames per training clip
    #[arg(long)]
    pub clip_len: Option<usize>,
    /// Head-box margin; negative values shrink the crop toward the face
    #[arg(long, allow_hyphen_values = true)]
    pub crop_scale: Option<f64>,
    /// Crop edge length in pixels fed to the network
    #[arg(long)]
    pub size: Option<usize>,
    /// Disable training-time augmentation
    #[arg(long)]
    pub no_augment: bool,
}

/// Everything a command needs after merging defaults, file, and flags.
#[derive(Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub options: TrainOptions,
    pub out: PathBuf,
}

pub fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let file = load_file_config(common.config.as_deref())?;
    let mut optimizer = file.optimizer.unwrap_or_default();
    optimizer.seed = common.seed;
    if let Some(epochs) = common.epochs {
        if epochs == 0 {
            return Err(CliError::Config("--epochs must be at least 1".into()));
        }
        optimizer.max_epochs = epochs;
        optimizer.min_epochs = optimizer.min_epochs.min(epochs);
    }
    if let Some(batch) = common.batch {
        if batch == 0 {
            return Err(CliError::Config("--batch must be at least 1".into()));
        }
        optimizer.batch_size = batch;
    }
    let clip_len = common.clip_len.or(file.clip_len).unwrap_or(8);
    if clip_len == 0 {
        return Err(CliError::Config("--clip-len must be at least 1".into()));
    }
    let workers = if deterministic_env() {
        1
    } else {
        common.workers.or(file.workers).unwrap_or(1).max(1)
    };
    let options = TrainOptions {
        optimizer,
        clip_len,
        crop_scale: common.crop_scale.or(file.crop_scale).unwrap_or(-0.10),
        out_size: common.size.or(file.size).unwrap_or(64),
        augment: !common.no_augment && file.augment.unwrap_or(true),
        workers,
        temporal_weights: file.temporal_weights,
    };
    let model = file.model.unwrap_or_else(ModelConfig::desk_default);
    model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(RunConfig { model, options, out: common.out.clone() })
}

/// GAT_DETERMINISTIC=1 pins the data pipeline to one thread.
pub fn deterministic_env() -> bool {
    std::env::var("GAT_DETERMINISTIC").is_ok_and(|v| v == "1")
}

pub fn parse_view(s: &str, flag: &str) -> Result<ModalityView, CliError> {
    ModalityView::parse(s)
        .ok_or_else(|| CliError::Config(format!("{flag}: expected i, v, or iv, got '{s}'")))
}

/// Creates the output directory and writes one file into it.
pub fn write_output(out: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("--out {}: {e}", out.display())))?;
    let path = out.join(name);
    fs::write(&path, content).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}
