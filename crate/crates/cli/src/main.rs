//! `orthosep` command-line front end.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, SeedTarget};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "orthosep", version, about = "Orthogonal residual decomposition of a target volume against feature volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration, or a `manifest.json` from an earlier run.
    #[arg(short = 'c', long = "config")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
    /// Data seed for `phantom`; network seed (replacing `seeds`) otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Feature set to use, e.g. `minus_vp`. With `ablate`, compares it to `full`.
    #[arg(long)]
    ablate: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (and optionally a DCE series).
    Phantom(Common),
    /// Train the network; resumes when `checkpoint` points at a saved run.
    Train(Common),
    /// Decompose a trained model's residual into maps and a regional table.
    Decompose(Common),
    /// Run the feature-ablation sweep over every seed.
    Ablate(Common),
    /// Fit the Tofts model voxel by voxel to a DCE series.
    #[command(name = "tofts-fit")]
    ToftsFit(Common),
    /// Time-to-peak map from a DCE series.
    Ttp(Common),
    /// Run the numerical self-test suite.
    Check(Common),
}

fn resolve(common: &Common, is_ablate: bool, is_phantom: bool) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    if let Some(a) = &common.ablate {
        let value = serde_json::to_string(a).expect("string serializes");
        if is_ablate {
            overrides.push(format!("ablations=[\"full\",{value}]"));
        } else {
            overrides.push(format!("selection={value}"));
        }
    }
    let target = if is_phantom { SeedTarget::Phantom } else { SeedTarget::Network };
    let seed = common.seed.map(|s| (s, target));
    config::resolve(common.config.as_deref(), &overrides, seed, common.out.as_deref())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Phantom(c) => (c, commands::phantom),
        Command::Train(c) => (c, commands::train),
        Command::Decompose(c) => (c, commands::decompose),
        Command::Ablate(c) => (c, commands::ablate),
        Command::ToftsFit(c) => (c, commands::tofts_fit),
        Command::Ttp(c) => (c, commands::ttp),
        Command::Check(c) => (c, commands::check),
    };
    let cfg = resolve(
        common,
        matches!(cli.command, Command::Ablate(_)),
        matches!(cli.command, Command::Phantom(_)),
    )?;
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    action(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
