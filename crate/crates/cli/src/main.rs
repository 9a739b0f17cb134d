//! `sfp`: generate targets and datasets, render scenes, train classifiers,
//! run scattering-parameter attacks and evaluate them.

mod commands;
mod config;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sfp_core::Error;

use settings::{AttackFlags, DatasetFlags, EvalFlags, SimulateFlags, TargetsFlags, TrainFlags};

#[derive(Debug, Parser)]
#[command(name = "sfp", version, about = "Scattering-feature-parameter attacks on simulated SAR imagery")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GlobalFlags {
    /// TOML or JSON settings file; keys mirror the long flag names.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Run seed; every random draw derives from it.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Output directory (a file path for a single `simulate` image).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the built-in target specifications and their scenes.
    GenTargets(TargetsFlags),
    /// Render a labeled dataset of every class over an azimuth sweep.
    GenDataset(DatasetFlags),
    /// Render one scene at one or more azimuths.
    Simulate(SimulateFlags),
    /// Train a classifier on a generated dataset.
    Train(TrainFlags),
    /// Optimize blend coefficients against a trained classifier.
    Attack(AttackFlags),
    /// Run an evaluation protocol.
    Eval(EvalFlags),
}

/// 2: configuration, 3: I/O, 4: validation of inputs.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Parse { .. } | Error::Validation(_) | Error::Shape { .. } | Error::Format(_) | Error::Divergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = cli.global.config.as_deref();
    let result = match &cli.command {
        Command::GenTargets(f) => commands::gen_targets(file, f, &cli.global),
        Command::GenDataset(f) => commands::gen_dataset(file, f, &cli.global),
        Command::Simulate(f) => commands::simulate(file, f, &cli.global),
        Command::Train(f) => commands::train(file, f, &cli.global),
        Command::Attack(f) => commands::attack(file, f, &cli.global),
        Command::Eval(f) => commands::eval(file, f, &cli.global),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
