use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfchain_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "mfchain", version, about = "Mean-field Markov chain experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Sample reference paths, Girsanov weights and the reweighted marginal.
    Simulate(Common),
    /// Picard iteration for the mean-field flow.
    FixedPoint(Common),
    /// Backward value field on the fixed-point flow.
    Bsde(Common),
    /// Optimal feedback control, oracle certification and cost cross-check.
    Control(Common),
    /// Zero-sum game: Isaacs check, saddle point and deviation report.
    Game(Common),
    /// Invariant suite for the configured model.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (0 uses all cores).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override a config value, e.g. `grid.cells=40` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, c) = match cli.command {
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::FixedPoint(c) => (Command::FixedPoint, c),
        Sub::Bsde(c) => (Command::Bsde, c),
        Sub::Control(c) => (Command::Control, c),
        Sub::Game(c) => (Command::Game, c),
        Sub::Validate(c) => (Command::Validate, c),
    };
    let opts = RunOptions { config: c.config, out: c.out, seed: c.seed, workers: c.workers, overrides: c.overrides };
    match run(cmd, &opts) {
        Ok(o) => {
            println!("{} ok: {} files in {}", cmd.name(), o.manifest.files.len(), o.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mfchain {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
