mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use madapt::adapt::AdaptMode;
use madapt::experiments::{ExperimentError, Method};
use madapt::synth::SynthError;
use madapt::training::TrainError;

#[derive(Debug, Parser)]
#[command(name = "madapt", version, about = "Meta-learned test-time adaptation for 3D pose regression")]
pub struct Cli {
    /// Print the configuration schema with defaults and exit.
    #[arg(long, global = true)]
    help_config: bool,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Plain supervised training.
    Pretrain(TrainArgs),
    /// First-order meta-training, dual networks unless --no-aux.
    MetaTrain(MetaTrainArgs),
    /// Test-time adaptation; writes predictions and loss traces.
    Adapt(AdaptArgs),
    /// Adaptation followed by MPJPE / PA-MPJPE against ground truth.
    Eval(AdaptArgs),
    /// Run an experiment plan.
    Experiment(ExperimentArgs),
    /// Finite-difference audit of all loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration (see --help-config).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional skeleton file; defaults to the built-in 16-joint skeleton.
    #[arg(long)]
    skeleton: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    domain: Option<String>,
    /// Number of batches B.
    #[arg(long)]
    b: Option<usize>,
    /// Samples per batch M.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    occlusion: Option<f64>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lambda_2d: Option<f64>,
    #[arg(long)]
    lambda_3d: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MetaTrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Train without the auxiliary network.
    #[arg(long)]
    no_aux: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Model directory written by pretrain or meta-train.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AdaptMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// TOML experiment plan.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    plan: Option<PathBuf>,
    /// Built-in plan: ablation, step-curves, detector, ood, lr-grid, inner-steps.
    #[arg(long)]
    preset: Option<String>,
    /// Replace the plan's seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods overriding the plan.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    train_batches: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random (parameters, sample) pairs per loss.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value = "grad-check")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<AdaptMode, String> {
    match s {
        "eft" => Ok(AdaptMode::Eft),
        "dual" => Ok(AdaptMode::Dual),
        "none" => Ok(AdaptMode::None),
        _ => Err(format!("unknown mode {s:?}; expected eft, dual or none")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } => 4,
            CliError::CheckFailed(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Divergence(_) => "divergence",
            CliError::Io { .. } => "io",
            CliError::CheckFailed(_) => "check_failed",
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) => CliError::Io {
                path: PathBuf::new(),
                message: e.to_string(),
            },
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Synth(s) => s.into(),
            ExperimentError::Io { path, source } => CliError::io(&path, source),
            ExperimentError::Plan(m) => CliError::Config(m),
            other => CliError::Divergence(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{}", config::help_config());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("{}", error_json(&CliError::Config("--jobs must be at least 1".into())));
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.code())
        }
    }
}

fn error_json(e: &CliError) -> String {
    serde_json::json!({
        "error": e.kind(),
        "exit_code": e.code(),
        "message": e.to_string(),
    })
    .to_string()
}
