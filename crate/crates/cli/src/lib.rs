//! Command line front end for the voxstack pipeline. One experiment lives
//! in a run directory; each subcommand brings that directory up to date
//! through its stage, so `evaluate` on a fresh directory runs everything.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod config;
pub mod pipeline;
pub mod report;

use config::ExperimentConfig;
use pipeline::Stage;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {msg}")]
    Stage { stage: &'static str, msg: String },
    #[error("run {run} is incomplete: missing {what}")]
    IncompleteRun { run: String, what: String },
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(name = "voxstack", version, about = "ensemble segmentation pipeline")]
struct Cli {
    /// experiment config file (key = value lines); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// overrides the seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// overrides the run directory from the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// run all stages through this one (generate, train-base, predict,
    /// train-meta, evaluate); alternative to naming a subcommand
    #[arg(long)]
    stage: Option<String>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// synthesize the dataset and write the split listing
    Generate,
    /// train the plane and volume base learners on labeled items
    TrainBase,
    /// write every learner's probability map for every item
    Predict,
    /// fit the fusion net on pseudo labels (random fit, then nn fit)
    TrainMeta,
    /// score every method on the test items
    Evaluate,
    /// compare sealed runs side by side
    Report {
        /// run directories to compare
        runs: Vec<PathBuf>,
    },
}

pub fn run() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let stage_of = |name: &str| {
        Stage::parse(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown stage {name}; expected one of {}",
                Stage::ALL.map(|s| s.tag()).join(", ")
            ))
        })
    };
    let target = match (&cli.command, &cli.stage) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("give either a subcommand or --stage, not both".into()))
        }
        (None, None) => {
            return Err(CliError::Usage("nothing to do; try --help".into()))
        }
        (None, Some(name)) => stage_of(name)?,
        (Some(Command::Report { runs }), None) => {
            let md = report::report(runs, cli.out.as_deref())?;
            print!("{md}");
            return Ok(());
        }
        (Some(cmd), None) => match cmd {
            Command::Generate => Stage::Generate,
            Command::TrainBase => Stage::TrainBase,
            Command::Predict => Stage::Predict,
            Command::TrainMeta => Stage::TrainMeta,
            Command::Evaluate => Stage::Evaluate,
            Command::Report { .. } => unreachable!(),
        },
    };

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    pipeline::run_to(&cfg, target)
}
