//! `freerun import` — one-shot conversion of foreign CSV recordings
//! into a dataset directory. Columns must be `t,<inputs...>,<outputs...>`
//! with a uniform time axis; an optional integer-ratio decimation
//! resamples everything to a coarser sampling time on the way in.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use freerun_core::{load_csv, resample, save_dataset, CsvSchema, Dataset, DatasetRole};

use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, clap::Args)]
pub struct ImportArgs {
    /// Comma-separated input channel names, matching the CSV header
    #[arg(long)]
    pub inputs: String,
    /// Comma-separated output channel names, matching the CSV header
    #[arg(long)]
    pub outputs: String,
    /// Training-role CSV files
    #[arg(long, num_args = 1.., required = true)]
    pub train: Vec<PathBuf>,
    /// Test-role CSV files
    #[arg(long, num_args = 1.., required = true)]
    pub test: Vec<PathBuf>,
    /// Resample to this sampling time (integer multiple of the source's)
    #[arg(long)]
    pub resample_ts: Option<f64>,
    /// Output dataset directory; default <out-root>/imported
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ImportSnapshot {
    inputs: Vec<String>,
    outputs: Vec<String>,
    train: Vec<String>,
    test: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resample_ts: Option<f64>,
}

fn names(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).collect()
}

pub fn run(args: &ImportArgs) -> Result<()> {
    let schema = CsvSchema { input_names: names(&args.inputs), output_names: names(&args.outputs) };
    if schema.input_names.iter().chain(&schema.output_names).any(|n| n.is_empty()) {
        bail!("empty channel name in --inputs/--outputs");
    }

    let load_role = |files: &[PathBuf], role: DatasetRole| -> Result<Dataset> {
        let mut trajectories = Vec::with_capacity(files.len());
        for path in files {
            let mut t =
                load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
            if let Some(ts) = args.resample_ts {
                t = resample(&t, ts).with_context(|| format!("resampling {}", path.display()))?;
            }
            trajectories.push(t);
        }
        Ok(Dataset::new(
            role,
            schema.input_names.clone(),
            schema.output_names.clone(),
            trajectories,
        )?)
    };
    let train = load_role(&args.train, DatasetRole::Train)?;
    let test = load_role(&args.test, DatasetRole::Test)?;

    let out = out_dir(args.out.clone(), "imported")?;
    save_dataset(&out, &train, &test, None, None)?;

    let mut artifacts = vec!["manifest.toml".to_string()];
    artifacts.extend(train.trajectories.iter().map(|t| format!("{}.csv", t.id())));
    artifacts.extend(test.trajectories.iter().map(|t| format!("{}.csv", t.id())));
    write_run_manifest(
        &out,
        "import",
        None,
        artifacts,
        ImportSnapshot {
            inputs: schema.input_names.clone(),
            outputs: schema.output_names.clone(),
            train: args.train.iter().map(|p| p.display().to_string()).collect(),
            test: args.test.iter().map(|p| p.display().to_string()).collect(),
            resample_ts: args.resample_ts,
        },
    )?;

    println!(
        "imported {} train + {} test trajectories (ts {}) -> {}",
        train.len(),
        test.len(),
        train.ts(),
        out.display()
    );
    Ok(())
}
