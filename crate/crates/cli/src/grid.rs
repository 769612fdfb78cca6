//! `freerun gridsearch` — run every combination of a hyperparameter
//! grid, rank by validation free-run NRMSE, and leave one manifest per
//! job. Failed or diverged combinations are reported in the table and
//! make the command exit nonzero unless `--allow-partial` is passed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use freerun_core::{
    grid_search, load_dataset, DatasetRole, GridResult, GridSpec, ModelKind, TrainStatus,
};

use crate::config::{resolve, ModelFlags, ModelOverrides, ModelTable, TrainFlags, TrainOverrides, TrainingTable};
use crate::manifest::{out_dir, write_run_manifest};

#[derive(Debug, clap::Args)]
pub struct GridArgs {
    /// TOML grid file: arch, [grid] axes, base [model]/[training] tables
    #[arg(long)]
    pub grid_file: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Worker threads; defaults to all cores
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit 0 even when some jobs failed or diverged
    #[arg(long)]
    pub allow_partial: bool,
    /// Output directory; default <out-root>/gridsearch
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// On-disk grid file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridFile {
    arch: Option<String>,
    grid: GridSpec,
    model: ModelOverrides,
    training: TrainOverrides,
}

#[derive(Serialize)]
struct GridSnapshot {
    data: String,
    arch: String,
    jobs_requested: usize,
    grid: GridSpec,
    model: ModelTable,
    training: TrainingTable,
}

/// jobs/job_NNN.toml — the exact spec/config one combination ran with.
#[derive(Serialize)]
struct JobManifest<'a> {
    job: usize,
    val_nrmse: f64,
    best_epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    model: ModelTable,
    training: TrainingTable,
}

fn status_cell(r: &GridResult) -> &'static str {
    match (&r.error, r.status) {
        (Some(_), _) => "failed",
        (None, Some(TrainStatus::Diverged)) => "diverged",
        (None, Some(TrainStatus::EarlyStopped)) => "early-stopped",
        (None, Some(TrainStatus::Completed)) => "completed",
        (None, None) => "failed",
    }
}

fn is_failure(r: &GridResult) -> bool {
    r.error.is_some() || r.status == Some(TrainStatus::Diverged) || r.status.is_none()
}

fn write_results(path: &Path, results: &[GridResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rank",
        "job",
        "hidden",
        "learning_rate",
        "window",
        "dropout",
        "val_nrmse",
        "best_epoch",
        "status",
        "error",
    ])?;
    for (rank, r) in results.iter().enumerate() {
        let hidden =
            r.spec.hidden_sizes.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x");
        w.write_record([
            (rank + 1).to_string(),
            r.job.to_string(),
            hidden,
            format!("{}", r.config.learning_rate),
            r.spec.window_length.to_string(),
            format!("{}", r.spec.dropout_p),
            format!("{}", r.val_nrmse),
            r.best_epoch.to_string(),
            status_cell(r).to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &GridArgs) -> Result<()> {
    if args.jobs == Some(0) {
        bail!("--jobs must be >= 1");
    }
    let text = std::fs::read_to_string(&args.grid_file)
        .with_context(|| format!("reading {}", args.grid_file.display()))?;
    let file: GridFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", args.grid_file.display()))?;
    let Some(arch) = &file.arch else {
        bail!("grid file must set arch (mlp, rnn, lstm, gru, or tcn)");
    };
    let kind: ModelKind = arch.parse()?;
    let g = &file.grid;
    if g.hidden_sizes.is_empty()
        && g.learning_rates.is_empty()
        && g.window_lengths.is_empty()
        && g.dropouts.is_empty()
    {
        bail!(
            "empty grid: set at least one axis under [grid] \
             (hidden_sizes, learning_rates, window_lengths, dropouts)"
        );
    }

    let data = load_dataset(&args.data, DatasetRole::Train)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let base = crate::config::FileConfig { model: file.model.clone(), training: file.training.clone() };
    let (spec, cfg) = resolve(
        kind,
        (data.input_dim(), data.output_dim()),
        &base,
        &ModelFlags { hidden: None, window: None, dropout: None },
        &TrainFlags {
            epochs: None,
            seed: None,
            learning_rate: None,
            unroll: None,
            warmup: None,
            batch_size: None,
        },
    )?;

    let results = grid_search(&spec, &cfg, &file.grid, &data, args.jobs.unwrap_or(0))?;

    let out = out_dir(args.out.clone(), "gridsearch")?;
    write_results(&out.join("results.csv"), &results)?;
    let jobs_dir = out.join("jobs");
    std::fs::create_dir_all(&jobs_dir)?;
    let mut artifacts = vec!["results.csv".to_string()];
    for r in &results {
        let name = format!("jobs/job_{:03}.toml", r.job);
        let manifest = JobManifest {
            job: r.job,
            val_nrmse: r.val_nrmse,
            best_epoch: r.best_epoch,
            status: r.status.map(|_| status_cell(r)),
            error: r.error.as_deref(),
            model: ModelTable::from(&r.spec),
            training: TrainingTable::from(&r.config),
        };
        std::fs::write(out.join(&name), toml::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {name}"))?;
        artifacts.push(name);
    }
    write_run_manifest(
        &out,
        "gridsearch",
        Some(cfg.seed),
        artifacts,
        GridSnapshot {
            data: args.data.display().to_string(),
            arch: kind.name().to_string(),
            jobs_requested: args.jobs.unwrap_or(0),
            grid: file.grid.clone(),
            model: ModelTable::from(&spec),
            training: TrainingTable::from(&cfg),
        },
    )?;

    let failures = results.iter().filter(|r| is_failure(r)).count();
    if let Some(best) = results.first().filter(|r| r.val_nrmse.is_finite()) {
        println!(
            "best of {}: job {} (hidden {:?}, lr {}, window {}, dropout {}) val NRMSE {:.4}",
            results.len(),
            best.job,
            best.spec.hidden_sizes,
            best.config.learning_rate,
            best.spec.window_length,
            best.spec.dropout_p,
            best.val_nrmse
        );
    }
    println!("results -> {}", out.join("results.csv").display());
    if failures > 0 && !args.allow_partial {
        bail!(
            "{failures} of {} grid jobs failed or diverged (see results.csv); \
             pass --allow-partial to accept a partial sweep",
            results.len()
        );
    }
    if failures > 0 {
        println!("{failures} of {} jobs failed or diverged (accepted: --allow-partial)", results.len());
    }
    Ok(())
}
