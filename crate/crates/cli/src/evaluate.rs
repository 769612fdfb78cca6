//! `freerun evaluate` — free-run a checkpoint over a dataset and write
//! the NRMSE report plus per-trajectory simulation traces.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use freerun_core::{
    evaluate_concatenated, evaluate_per_trajectory, export_simulation, load_dataset, write_report,
    Checkpoint, CsvSchema, DatasetRole, ReportRow,
};

use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    /// Reset state per trajectory; report the mean NRMSE (batch protocol)
    PerTrajectory,
    /// One uninterrupted free run across all trajectories in order
    Concatenated,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// checkpoint.json written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory to score against
    #[arg(long)]
    pub data: PathBuf,
    /// Which split of the dataset to use
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = EvalMode::PerTrajectory)]
    pub mode: EvalMode,
    /// Concatenated mode diagnostic: re-warm at each trajectory join
    #[arg(long)]
    pub reset_at_joins: bool,
    /// Output directory; default <out-root>/evaluate
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvaluateSnapshot {
    checkpoint: String,
    data: String,
    split: String,
    mode: String,
    reset_at_joins: bool,
    warmup: usize,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let role = match args.split.as_str() {
        "train" => DatasetRole::Train,
        "test" => DatasetRole::Test,
        other => bail!("unknown split '{other}' (valid: train, test)"),
    };
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = ckpt.restore()?;
    let data = load_dataset(&args.data, role)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;

    let spec = model.spec();
    if spec.input_dim != data.input_dim() || spec.output_dim != data.output_dim() {
        bail!(
            "checkpoint expects {} input / {} output channels, dataset has {} / {}",
            spec.input_dim,
            spec.output_dim,
            data.input_dim(),
            data.output_dim()
        );
    }

    let warmup = ckpt.meta.warmup_steps;
    let report = match args.mode {
        EvalMode::PerTrajectory => evaluate_per_trajectory(&model, &ckpt.norm, &data, warmup)?,
        EvalMode::Concatenated => {
            evaluate_concatenated(&model, &ckpt.norm, &data, warmup, args.reset_at_joins)?
        }
    };

    let out = out_dir(args.out.clone(), "evaluate")?;
    let dataset_name = args
        .data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.data.display().to_string());
    write_report(
        &out.join("report.csv"),
        &[ReportRow {
            dataset: dataset_name,
            arch: spec.kind.name().to_string(),
            strategy: ckpt.meta.strategy.name().to_string(),
            nrmse: report.aggregate,
        }],
    )?;

    let mut per = csv::Writer::from_path(out.join("per_trajectory.csv"))?;
    for row in &report.per_trajectory {
        per.serialize(row)?;
    }
    per.flush()?;

    let schema =
        CsvSchema { input_names: data.input_names.clone(), output_names: data.output_names.clone() };
    let mut artifacts = vec!["report.csv".to_string(), "per_trajectory.csv".to_string()];
    for sim in &report.simulations {
        let name = format!("sim_{}.csv", sim.id);
        export_simulation(&out.join(&name), sim, &schema)?;
        artifacts.push(name);
    }

    let mode_name = match args.mode {
        EvalMode::PerTrajectory => "per-trajectory",
        EvalMode::Concatenated => "concatenated",
    };
    write_run_manifest(
        &out,
        "evaluate",
        None,
        artifacts,
        EvaluateSnapshot {
            checkpoint: args.checkpoint.display().to_string(),
            data: args.data.display().to_string(),
            split: args.split.clone(),
            mode: mode_name.to_string(),
            reset_at_joins: args.reset_at_joins,
            warmup,
        },
    )?;

    println!(
        "{} {} ({}): NRMSE {:.4} over {} trajectories -> {}",
        spec.kind.name(),
        mode_name,
        ckpt.meta.strategy,
        report.aggregate,
        data.len(),
        out.display()
    );
    Ok(())
}
