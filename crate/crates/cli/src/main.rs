//! `freerun` — black-box simulators of sampled dynamical systems:
//! generate or import datasets, train under either strategy, grid-search
//! hyperparameters, evaluate free-running accuracy, and compare
//! strategies head to head. Artifacts land under `FREERUN_OUT` (default
//! `runs/`); every command leaves a `run.toml` provenance manifest.

mod compare;
mod config;
mod evaluate;
mod generate;
mod grid;
mod import;
mod manifest;
mod train_cmd;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "freerun", version, about = "Neural simulators of sampled dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic plant into a train/test dataset directory
    Generate(generate::GenerateArgs),
    /// Convert foreign CSV recordings into a dataset directory
    Import(import::ImportArgs),
    /// Train one model; writes checkpoint.json, history.csv, run.toml
    Train(train_cmd::TrainArgs),
    /// Free-run a checkpoint over a dataset; writes NRMSE report + traces
    Evaluate(evaluate::EvaluateArgs),
    /// Train every grid combination and rank by validation NRMSE
    Gridsearch(grid::GridArgs),
    /// Both strategies across architectures, matched budgets, one matrix
    Compare(compare::CompareArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Import(args) => import::run(args),
        Command::Train(args) => train_cmd::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Gridsearch(args) => grid::run(args),
        Command::Compare(args) => compare::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
