//! `freerun compare` — the headline experiment as one command: train
//! each requested architecture under both strategies with matched
//! budgets and identical seeds, free-run on the test split, and emit
//! the strategy-comparison matrix with a winner column.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use freerun_core::{
    evaluate_per_trajectory, load_dataset, train, DatasetRole, ModelKind, Strategy,
    ALL_STRATEGIES,
};

use crate::config::{load_file_config, resolve, ModelFlags, ModelTable, TrainFlags, TrainingTable};
use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated architectures; default all five
    #[arg(long, default_value = "mlp,rnn,lstm,gru,tcn")]
    pub archs: String,
    /// TOML config applied to every arm ([training].strategy is ignored)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; default <out-root>/compare
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Serialize)]
struct CompareSnapshot {
    data: String,
    archs: Vec<String>,
    model: ModelTable,
    training: TrainingTable,
}

struct Arm {
    arch: &'static str,
    strategy: Strategy,
    nrmse: f64,
}

fn write_matrix(path: &Path, arms: &[Arm]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arch", "strategy", "nrmse", "winner"])?;
    for pair in arms.chunks(2) {
        let winner = match (pair[0].nrmse, pair[1].nrmse) {
            (a, b) if a.is_nan() && b.is_nan() => "none",
            (a, b) if b.is_nan() || a <= b => pair[0].strategy.name(),
            _ => pair[1].strategy.name(),
        };
        for arm in pair {
            w.write_record([
                arm.arch,
                arm.strategy.name(),
                &format!("{}", arm.nrmse),
                winner,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &CompareArgs) -> Result<()> {
    let kinds: Vec<ModelKind> =
        args.archs.split(',').map(|s| s.trim().parse()).collect::<freerun_core::Result<_>>()?;
    let file = load_file_config(args.config.as_deref())?;
    let train_data = load_dataset(&args.data, DatasetRole::Train)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let test_data = load_dataset(&args.data, DatasetRole::Test)?;
    let dims = (train_data.input_dim(), train_data.output_dim());

    let mut arms = Vec::with_capacity(kinds.len() * 2);
    let mut snapshot = None;
    for kind in &kinds {
        let (spec, base_cfg) =
            resolve(*kind, dims, &file, &args.model_flags, &args.train_flags)?;
        for warning in spec.validate()? {
            eprintln!("warning: {warning}");
        }
        // same seed in both arms: identical init, split, and shuffling
        for strategy in ALL_STRATEGIES {
            let mut cfg = base_cfg.clone();
            cfg.strategy = strategy;
            cfg.validate(&spec)?;
            let outcome = train(&spec, &train_data, &cfg)?;
            let report =
                evaluate_per_trajectory(&outcome.model, &outcome.norm, &test_data, cfg.warmup)?;
            println!(
                "{} {}: {} (best epoch {}), test NRMSE {:.4}",
                kind.name(),
                strategy,
                outcome.status,
                outcome.best_epoch,
                report.aggregate
            );
            arms.push(Arm { arch: kind.name(), strategy, nrmse: report.aggregate });
        }
        if snapshot.is_none() {
            snapshot = Some((ModelTable::from(&spec), TrainingTable::from(&base_cfg)));
        }
    }

    let out = out_dir(args.out.clone(), "compare")?;
    write_matrix(&out.join("compare.csv"), &arms)?;
    let (model_table, training_table) = snapshot.expect("at least one architecture");
    write_run_manifest(
        &out,
        "compare",
        Some(training_table.seed),
        vec!["compare.csv".to_string()],
        CompareSnapshot {
            data: args.data.display().to_string(),
            archs: kinds.iter().map(|k| k.name().to_string()).collect(),
            model: model_table,
            training: training_table,
        },
    )?;
    println!("matrix -> {}", out.join("compare.csv").display());
    Ok(())
}
