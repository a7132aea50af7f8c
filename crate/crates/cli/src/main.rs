//! `gridformer`: datasets, training, evaluation and reports from one TOML
//! config per run.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "gridformer", version, about = "Variable-tokenized transformer for gridded weather and climate data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every random draw in the run; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Run directory [default: runs/<command>].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dotted config key set to a TOML value, e.g. `pretrain.train.fit.steps=50`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic series (and optionally coarse or projection data).
    GenData,
    /// Bilinearly interpolate a dataset onto another equiangular grid.
    Regrid,
    /// Cut a lat/lon box out of a dataset.
    Crop,
    /// Build sub-seasonal window-averaged targets.
    S2sBuild,
    /// Pretrain on one or more sources with randomized lead times.
    Pretrain,
    /// Finetune a forecaster in one of the protocol modes.
    Finetune,
    /// Score a checkpoint or a prediction series against a dataset.
    Evaluate,
    /// Roll a checkpoint forward autoregressively.
    Rollout,
    /// Train coarse-to-fine downscaling.
    Downscale,
    /// Train the climate projection head.
    Project,
    /// Finite-difference check of the configured model's gradients.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Regrid => "regrid",
            Command::Crop => "crop",
            Command::S2sBuild => "s2s-build",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Rollout => "rollout",
            Command::Downscale => "downscale",
            Command::Project => "project",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GRIDFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("GRIDFORMER_THREADS={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let command = cli.command.name();
    let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(command));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let run = Run { out, command };
    log::info!("{command} → {}", run.out.display());
    match cli.command {
        Command::GenData => commands::gen_data(&mut cfg, &run),
        Command::Regrid => commands::regrid(&mut cfg, &run),
        Command::Crop => commands::crop(&mut cfg, &run),
        Command::S2sBuild => commands::s2s_build(&mut cfg, &run),
        Command::Pretrain => commands::pretrain_cmd(&mut cfg, &run),
        Command::Finetune => commands::finetune(&mut cfg, &run),
        Command::Evaluate => commands::evaluate(&mut cfg, &run),
        Command::Rollout => commands::rollout_cmd(&mut cfg, &run),
        Command::Downscale => commands::downscale(&mut cfg, &run),
        Command::Project => commands::project(&mut cfg, &run),
        Command::Gradcheck => {
            if commands::gradcheck(&mut cfg, &run)? {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check exceeded the threshold".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
