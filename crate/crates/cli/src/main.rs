//! `riot`: simulate, ingest, train, infer, eval and export-attention.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riot_core::config::RunConfig;
use riot_core::nets::ModelKind;
use riot_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "riot",
    version,
    about = "Inertial odometry with recursive transformers"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for simulation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Network kind: riot, ariot or gru.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Writes synthetic recordings as CSV.
    Simulate,
    /// Loads and windows the configured recordings and reports counts.
    Ingest,
    /// Trains a model; continues from an existing checkpoint in the output.
    Train,
    /// Writes recursive-inference trajectories.
    Infer(ModelArgs),
    /// Writes ATE/RTE per sequence, weighted means and error CDFs.
    Eval(ModelArgs),
    /// Writes the attention matrices of one window.
    ExportAttention(CheckpointArgs),
}

#[derive(clap::Args, Debug, Clone)]
struct CheckpointArgs {
    /// Checkpoint file; `<out>/model/checkpoint.bin` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone)]
struct ModelArgs {
    /// Checkpoint file; `<out>/model/checkpoint.bin` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Replay true displacements instead of running a model.
    #[arg(long)]
    oracle: bool,
}

/// Exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Schema(_) | Error::InsufficientData(_) => 3,
        Error::TrainingDiverged(_) => 4,
        _ => 1,
    }
}

fn resolve(cli: &Cli) -> Result<(RunConfig, String), Error> {
    let (mut cfg, text) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (RunConfig::from_toml(&text)?, text)
        }
        None => {
            let cfg = RunConfig::default();
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.simulation.seed = seed;
    }
    if let Some(model) = cli.model {
        cfg.net.model = model;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (cfg, text) = resolve(cli)?;
    let ctx = commands::Context {
        cfg,
        config_text: text,
        args: std::env::args().collect(),
    };
    match &cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Ingest => commands::ingest(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Infer(a) => commands::infer(&ctx, a.checkpoint.as_deref(), a.oracle),
        Command::Eval(a) => commands::eval(&ctx, a.checkpoint.as_deref(), a.oracle),
        Command::ExportAttention(a) => commands::export_attention(&ctx, a.checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
