//! `semvid`: hierarchical semantics-guided video prediction at desk scale.
//! Every subcommand reads one TOML config and works inside a named run
//! directory under the ledger root (`SEMVID_LEDGER_ROOT`, default `./runs`).

mod commands;
mod ledger;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use semvid_core::config::ExperimentConfig;
use semvid_core::Error;

use crate::commands::Reproduction;
use crate::ledger::RunDir;

#[derive(Parser)]
#[command(name = "semvid", version, about = "two-stage semantics-guided video prediction")]
struct Cli {
    /// Experiment config (TOML). Omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run name under the ledger root.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReproTarget {
    Table1,
    Table4,
    Table5,
    Convergence,
}

#[derive(Subcommand)]
enum Command {
    /// Write the commented default config to a file.
    InitConfig {
        /// Output path.
        path: PathBuf,
    },
    /// Generate the synthetic clip dataset.
    GenerateData,
    /// Fit the feature projection and latent normalization; cache features.
    FitPca,
    /// Train the stage-1 feature forecaster.
    TrainStage1,
    /// Roll the forecaster over every clip and cache predicted features.
    RolloutFeatures,
    /// Train the stage-2 latent denoiser.
    TrainStage2,
    /// Sample one clip continuation and write it as a clip artifact.
    Sample {
        /// Clip index (default: first validation clip).
        #[arg(long)]
        clip: Option<usize>,
    },
    /// Run the full evaluation protocol on the validation split.
    Evaluate,
    /// Train and evaluate a preset comparison end to end.
    Reproduce {
        #[arg(value_enum)]
        target: ReproTarget,
    },
    /// Render training-loss curves from the run log.
    Plot,
}

fn load_config(path: &Option<PathBuf>) -> semvid_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: &Cli) -> semvid_core::Result<()> {
    if let Command::InitConfig { path } = &cli.command {
        return commands::init_config(path);
    }
    let cfg = load_config(&cli.config)?;
    let run_dir = RunDir::open(&cli.run)?;
    match &cli.command {
        Command::InitConfig { .. } => unreachable!(),
        Command::GenerateData => commands::generate_data(&cfg, &run_dir),
        Command::FitPca => commands::fit_pca(&cfg, &run_dir),
        Command::TrainStage1 => commands::cmd_train_stage1(&cfg, &run_dir),
        Command::RolloutFeatures => commands::rollout_features(&cfg, &run_dir),
        Command::TrainStage2 => commands::cmd_train_stage2(&cfg, &run_dir),
        Command::Sample { clip } => commands::sample(&cfg, &run_dir, *clip),
        Command::Evaluate => commands::evaluate(&cfg, &run_dir),
        Command::Reproduce { target } => {
            let which = match target {
                ReproTarget::Table1 => Reproduction::Table1,
                ReproTarget::Table4 => Reproduction::Table4,
                ReproTarget::Table5 => Reproduction::Table5,
                ReproTarget::Convergence => Reproduction::Convergence,
            };
            commands::reproduce(&cfg, &run_dir, which)
        }
        Command::Plot => commands::plot(&run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Argument(_) => 2,
                Error::Dependency(_) | Error::CacheInvalid(_) => 3,
                Error::Numerical(_) => 4,
                _ => 1,
            })
        }
    }
}
