//! `bifuser` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bifuser::bti::ReduceRecover;
use bifuser::config::ConfigError;
use bifuser::eval::EvalError;
use bifuser::imaging::{ImagingError, Split};
use bifuser::model::ModelError;
use bifuser::{InputMode, NetError};

#[derive(Parser, Debug)]
#[command(name = "bifuser", version, about = "Dual-stream fovea localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named preset: paper-512, tisu, smoke or desk.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory receiving every output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input_mode: Option<InputMode>,
    #[arg(long, global = true)]
    pub reduce_recover: Option<ReduceRecover>,
    /// Allow writing into a non-empty run directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        /// Side of the generated images.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on the training split of a manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint with the R rule.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Localize the fovea in one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        vessel: Option<PathBuf>,
    },
    /// Print the analytic FLOPs breakdown.
    Flops,
    /// Export per-stage attention heatmaps for one manifest sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Sample id (file stem); defaults to the first row.
        #[arg(long)]
        sample: Option<String>,
    },
}

/// Bad input from the operator, reported with exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(e: &anyhow::Error) -> bool {
    fn imaging(e: &ImagingError) -> bool {
        !matches!(e, ImagingError::Image { .. } | ImagingError::Io(_) | ImagingError::Csv(_))
    }
    fn net(e: &NetError) -> bool {
        !matches!(e, NetError::Tensor(_) | NetError::NonFiniteInput(_))
    }
    e.chain().any(|c| {
        c.is::<Invalid>()
            || c.is::<ConfigError>()
            || c.downcast_ref::<ImagingError>().is_some_and(imaging)
            || c.downcast_ref::<NetError>().is_some_and(net)
            || c.downcast_ref::<EvalError>().is_some_and(|e| matches!(e, EvalError::LengthMismatch { .. } | EvalError::InvalidRadius { .. }))
            || c.downcast_ref::<ModelError>().is_some_and(|e| match e {
                ModelError::Net(n) => net(n),
                ModelError::Imaging(i) => imaging(i),
                ModelError::MissingVessel { .. } | ModelError::EmptyDataset | ModelError::UnsupportedVersion(_) | ModelError::Checkpoint(_) => true,
                _ => false,
            })
    })
}

pub fn parse_split(s: &str) -> anyhow::Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other.parse().map(Some).map_err(|e: String| Invalid(e).into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Synth { count, size } => commands::synth(&cli.common, count, size),
        Command::Train { manifest } => commands::train(&cli.common, manifest),
        Command::Eval { checkpoint, manifest, split } => commands::eval(&cli.common, &checkpoint, manifest, &split),
        Command::Predict { checkpoint, image, vessel } => commands::predict(&cli.common, &checkpoint, &image, vessel.as_deref()),
        Command::Flops => commands::flops(&cli.common),
        Command::Viz { checkpoint, manifest, sample } => commands::viz(&cli.common, &checkpoint, manifest, sample.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
