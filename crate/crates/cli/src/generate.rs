//! `freerun generate` — simulate a registered plant under randomized
//! test signals and write a train/test dataset directory.

use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use freerun_core::{make_synthetic_benchmark, plant, save_dataset};

use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Plant to simulate: linear1, valve2, or oscillator
    #[arg(long)]
    pub plant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory; default <out-root>/<plant>-seed<seed>
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub train_trajectories: usize,
    #[arg(long, default_value_t = 200)]
    pub train_length: usize,
    #[arg(long, default_value_t = 10)]
    pub test_trajectories: usize,
    /// Test horizon; must exceed the training length
    #[arg(long, default_value_t = 1000)]
    pub test_length: usize,
}

#[derive(Serialize)]
struct GenerateSnapshot {
    plant: String,
    train_trajectories: usize,
    train_length: usize,
    test_trajectories: usize,
    test_length: usize,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let plant = plant(&args.plant)?;
    let (train, test) = make_synthetic_benchmark(
        &plant,
        args.train_trajectories,
        args.train_length,
        args.test_trajectories,
        args.test_length,
        args.seed,
    )?;
    let out = out_dir(args.out.clone(), &format!("{}-seed{}", plant.name, args.seed))?;
    save_dataset(&out, &train, &test, Some(plant.name.to_string()), Some(args.seed))?;

    let mut artifacts = vec!["manifest.toml".to_string()];
    artifacts.extend(train.trajectories.iter().map(|t| format!("{}.csv", t.id())));
    artifacts.extend(test.trajectories.iter().map(|t| format!("{}.csv", t.id())));
    write_run_manifest(
        &out,
        "generate",
        Some(args.seed),
        artifacts,
        GenerateSnapshot {
            plant: plant.name.to_string(),
            train_trajectories: args.train_trajectories,
            train_length: args.train_length,
            test_trajectories: args.test_trajectories,
            test_length: args.test_length,
        },
    )?;

    println!(
        "generated {}: {} train x {} samples, {} test x {} samples -> {}",
        plant.name,
        train.len(),
        args.train_length,
        test.len(),
        args.test_length,
        out.display()
    );
    Ok(())
}
