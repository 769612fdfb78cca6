//! `freerun train` — fit one model on a dataset directory and write the
//! best checkpoint, the per-epoch history, and the run manifest.

use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use freerun_core::rng::tags;
use freerun_core::{
    fit_normalizer, load_dataset, train, Checkpoint, CheckpointMeta, DatasetRole, Model,
    ModelKind, SeedStream,
};

use crate::config::{load_file_config, resolve, ModelFlags, ModelTable, TrainFlags, TrainingTable};
use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Dataset directory (from `generate` or `import`)
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture: mlp, rnn, lstm, gru, or tcn
    #[arg(long)]
    pub arch: String,
    /// series-parallel (teacher forcing) or parallel (prediction feedback)
    #[arg(long)]
    pub strategy: Option<String>,
    /// TOML file with [model] and [training] tables
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; default <out-root>/train-<arch>
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint the freshly initialized model without training
    #[arg(long)]
    pub init_only: bool,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Serialize)]
struct TrainSnapshot {
    data: String,
    arch: String,
    model: ModelTable,
    training: TrainingTable,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let kind: ModelKind = args.arch.parse()?;
    let file = load_file_config(args.config.as_deref())?;
    let data = load_dataset(&args.data, DatasetRole::Train)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;

    let (spec, mut cfg) =
        resolve(kind, (data.input_dim(), data.output_dim()), &file, &args.model_flags, &args.train_flags)?;
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse()?;
    }
    for warning in spec.validate()? {
        eprintln!("warning: {warning}");
    }
    cfg.validate(&spec)?;

    let out = out_dir(args.out.clone(), &format!("train-{}", kind.name()))?;
    let mut artifacts = vec!["checkpoint.json".to_string()];

    if args.init_only {
        let norm = fit_normalizer(&data)?;
        let model = Model::init(spec.clone(), SeedStream::new(cfg.seed).derive(tags::PARAM_INIT))?;
        let meta = CheckpointMeta {
            warmup_steps: cfg.warmup,
            strategy: cfg.strategy,
            seed: cfg.seed,
            epoch: None,
            val_nrmse: None,
        };
        Checkpoint::capture(&model, &norm, meta).save(&out.join("checkpoint.json"))?;
        println!("initialized {} (no training) -> {}", kind.name(), out.display());
    } else {
        let outcome = train(&spec, &data, &cfg)?;
        let best_nrmse = outcome.best_record().map(|r| r.val_nrmse).filter(|v| v.is_finite());
        let meta = CheckpointMeta {
            warmup_steps: cfg.warmup,
            strategy: cfg.strategy,
            seed: cfg.seed,
            epoch: (outcome.best_epoch > 0).then_some(outcome.best_epoch),
            val_nrmse: best_nrmse,
        };
        Checkpoint::capture(&outcome.model, &outcome.norm, meta)
            .save(&out.join("checkpoint.json"))?;
        freerun_core::train::write_history(&out.join("history.csv"), &outcome.history)?;
        artifacts.push("history.csv".to_string());
        println!(
            "trained {} ({}): {} after {} epochs, best epoch {}, val NRMSE {:.4}",
            kind.name(),
            cfg.strategy,
            outcome.status,
            outcome.history.len(),
            outcome.best_epoch,
            best_nrmse.unwrap_or(f64::NAN),
        );
        println!("artifacts -> {}", out.display());
    }

    write_run_manifest(
        &out,
        "train",
        Some(cfg.seed),
        artifacts,
        TrainSnapshot {
            data: args.data.display().to_string(),
            arch: kind.name().to_string(),
            model: ModelTable::from(&spec),
            training: TrainingTable::from(&cfg),
        },
    )?;
    Ok(())
}
