use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::ExperimentConfig;

/// Failures sorted by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config or missing inputs (exit 2).
    Usage(String),
    /// The command ran but a checked property or solve failed (exit 1).
    Failure(String),
}

impl From<molkit::MolError> for CliError {
    fn from(e: molkit::MolError) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<molkit::imaging::io::DatasetError> for CliError {
    fn from(e: molkit::imaging::io::DatasetError) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "molkit", version, about = "Monotone operator learning for multi-coil MRI reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory of this command; defaults to a subdirectory of `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/val/test synthetic datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured method and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root; defaults to the config's dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct every sample of a dataset split.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; not needed for `sense`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to reconstruct; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overrides the config's method.
        #[arg(long, value_parser = ["mol", "modl", "sense"])]
        method: Option<String>,
    },
    /// Check the theory properties of a trained MOL checkpoint on the test split.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Robustness sweep over perturbation kinds and sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Repeatable `NAME=DIR`; the method is read from the checkpoint directory.
        #[arg(long = "checkpoint", value_name = "NAME=DIR")]
        checkpoints: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common }
            | Command::Train { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Verify { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MOLKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MOLKIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let common = cli.command.common();
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = |sub: &str| common.out.clone().unwrap_or_else(|| cfg.output_dir.join(sub));
    match &cli.command {
        Command::Generate { common } => commands::generate(&cfg, &out("data"), common.force),
        Command::Train { common, data } => {
            commands::train(&cfg, data.clone().unwrap_or_else(|| cfg.dataset_root()), &out("train"), common.force)
        }
        Command::Reconstruct { common, checkpoint, input, method } => {
            let method = match method.as_deref() {
                Some("modl") => config::Method::Modl,
                Some("sense") => config::Method::Sense,
                Some(_) => config::Method::Mol,
                None => cfg.method,
            };
            let input = input.clone().unwrap_or_else(|| cfg.dataset_root().join("test"));
            commands::reconstruct(&cfg, method, checkpoint.as_deref(), &input, &out("reconstruct"), common.force)
        }
        Command::Verify { common, checkpoint, data } => {
            let root = data.clone().unwrap_or_else(|| cfg.dataset_root());
            commands::verify(&cfg, checkpoint, &root, &out("verify"), common.force)
        }
        Command::Sweep { common, checkpoints, data } => {
            let root = data.clone().unwrap_or_else(|| cfg.dataset_root());
            commands::sweep(&cfg, checkpoints, &root, &out("sweep"), common.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
    }
}
