use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuseg_cli::commands;
use fuseg_cli::config::Config;
use fuseg_core::{Error, Result};

/// Joint infrared/visible fusion and semantic segmentation.
#[derive(Parser)]
#[command(name = "fuseg", version)]
struct Cli {
    /// TOML configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the synthetic-scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Checkpoint directory to resume training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic train and val splits into --out.
    Synth,
    /// Trains on the configured training split.
    Train,
    /// Writes gray and color fused images for every pair in DIR.
    Fuse { checkpoint: PathBuf, dir: PathBuf },
    /// Writes palette label maps for every pair in DIR.
    Segment { checkpoint: PathBuf, dir: PathBuf },
    /// Writes fusion and segmentation metric CSVs.
    Eval { checkpoint: PathBuf, dir: Option<PathBuf> },
    /// Writes the λ and convergence-rate history of a checkpoint as CSV.
    InspectWeights { checkpoint: PathBuf },
}

fn config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn run(cli: &Cli) -> Result<()> {
    if cli.resume.is_some() && !matches!(cli.command, Command::Train) {
        return Err(Error::Config("--resume only applies to train".into()));
    }
    match &cli.command {
        Command::Synth => commands::synth(&config(cli)?, &cli.out),
        Command::Train => commands::train(&config(cli)?, &cli.out, cli.resume.as_deref()).map(|_| ()),
        Command::Fuse { checkpoint, dir } => {
            let n = commands::fuse(checkpoint, dir, &cli.out)?;
            log::info!("fused {n} pairs");
            Ok(())
        }
        Command::Segment { checkpoint, dir } => {
            let n = commands::segment(checkpoint, dir, &cli.out)?;
            log::info!("segmented {n} pairs");
            Ok(())
        }
        Command::Eval { checkpoint, dir } => commands::eval(checkpoint, dir.as_deref(), &cli.out).map(|_| ()),
        Command::InspectWeights { checkpoint } => commands::inspect_weights(checkpoint, &cli.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
