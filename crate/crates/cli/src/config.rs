//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then command-line flags. Each layer only touches keys it sets.
//!
//! The same tables appear in run manifests with every key resolved, so a
//! manifest's `[config.model]` / `[config.training]` sections are valid
//! `--config` input. Two encodings exist only in the file layer:
//! `clip_norm = 0` disables clipping and `stride = 0` restores the
//! non-overlapping default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use freerun_core::tape::Activation;
use freerun_core::{ModelSpec, Strategy, TrainingConfig};

/// `[model]` table of a config file; unset keys keep their defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden_sizes: Option<Vec<usize>>,
    pub window_length: Option<usize>,
    pub activation: Option<Activation>,
    pub skip_connection: Option<bool>,
    pub dropout: Option<f64>,
    pub tcn_kernel_width: Option<usize>,
    pub tcn_dilations: Option<Vec<usize>>,
}

impl ModelOverrides {
    pub fn apply(&self, spec: &mut ModelSpec) {
        if let Some(v) = &self.hidden_sizes {
            spec.hidden_sizes = v.clone();
        }
        if let Some(v) = self.window_length {
            spec.window_length = v;
        }
        if let Some(v) = self.activation {
            spec.activation = v;
        }
        if let Some(v) = self.skip_connection {
            spec.skip_connection = v;
        }
        if let Some(v) = self.dropout {
            spec.dropout_p = v;
        }
        if let Some(v) = self.tcn_kernel_width {
            spec.tcn_kernel_width = v;
        }
        if let Some(v) = &self.tcn_dilations {
            spec.tcn_dilations = Some(v.clone());
        }
    }
}

/// `[training]` table of a config file, field for field.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub strategy: Option<Strategy>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    /// 0 disables clipping.
    pub clip_norm: Option<f64>,
    pub unroll: Option<usize>,
    /// 0 restores the non-overlapping default (= unroll).
    pub stride: Option<usize>,
    pub warmup: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub patience: Option<usize>,
    pub shuffle: Option<bool>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainingConfig) {
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = if v == 0.0 { None } else { Some(v) };
        }
        if let Some(v) = self.unroll {
            cfg.unroll = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = if v == 0 { None } else { Some(v) };
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.validation_fraction {
            cfg.validation_fraction = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.shuffle {
            cfg.shuffle = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

/// A whole config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelOverrides,
    pub training: TrainOverrides,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ── flag layer ───────────────────────────────────────────────────────

/// Model flags shared by `train` and `compare`; highest precedence.
#[derive(Debug, Clone, clap::Args)]
pub struct ModelFlags {
    /// Comma-separated hidden layer widths, e.g. 16,8
    #[arg(long)]
    pub hidden: Option<String>,
    /// History window length (window architectures)
    #[arg(long)]
    pub window: Option<usize>,
    /// Dropout probability during training
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl ModelFlags {
    pub fn apply(&self, spec: &mut ModelSpec) -> Result<()> {
        if let Some(h) = &self.hidden {
            spec.hidden_sizes = parse_widths(h)?;
        }
        if let Some(w) = self.window {
            spec.window_length = w;
        }
        if let Some(d) = self.dropout {
            spec.dropout_p = d;
        }
        Ok(())
    }
}

/// Training flags shared by `train` and `compare`; highest precedence.
#[derive(Debug, Clone, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Root seed for init, splits, shuffling, and dropout
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Predicted steps per training segment (parallel strategy)
    #[arg(long)]
    pub unroll: Option<usize>,
    /// Measured samples fed before predictions start
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainingConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.unroll {
            cfg.unroll = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
    }
}

pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad layer width '{p}'")))
        .collect()
}

/// Defaults for `dims`, then the config file, then flags.
pub fn resolve(
    kind: freerun_core::ModelKind,
    dims: (usize, usize),
    file: &FileConfig,
    mflags: &ModelFlags,
    tflags: &TrainFlags,
) -> Result<(ModelSpec, TrainingConfig)> {
    let mut spec = ModelSpec::new(kind, dims.0, dims.1);
    file.model.apply(&mut spec);
    mflags.apply(&mut spec)?;
    let mut cfg = TrainingConfig::default();
    file.training.apply(&mut cfg);
    tflags.apply(&mut cfg);
    Ok((spec, cfg))
}

// ── resolved snapshots (manifest form) ──────────────────────────────

/// Fully resolved `[model]` table as it appears in a run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ModelTable {
    pub hidden_sizes: Vec<usize>,
    pub window_length: usize,
    pub activation: Activation,
    pub skip_connection: bool,
    pub dropout: f64,
    pub tcn_kernel_width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tcn_dilations: Option<Vec<usize>>,
}

impl From<&ModelSpec> for ModelTable {
    fn from(spec: &ModelSpec) -> Self {
        ModelTable {
            hidden_sizes: spec.hidden_sizes.clone(),
            window_length: spec.window_length,
            activation: spec.activation,
            skip_connection: spec.skip_connection,
            dropout: spec.dropout_p,
            tcn_kernel_width: spec.tcn_kernel_width,
            tcn_dilations: spec.tcn_dilations.clone(),
        }
    }
}

/// Fully resolved `[training]` table (file-layer encodings: 0 = off).
#[derive(Debug, Clone, Serialize)]
pub struct TrainingTable {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub unroll: usize,
    pub stride: usize,
    pub warmup: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl From<&TrainingConfig> for TrainingTable {
    fn from(cfg: &TrainingConfig) -> Self {
        TrainingTable {
            strategy: cfg.strategy,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            clip_norm: cfg.clip_norm.unwrap_or(0.0),
            unroll: cfg.unroll,
            stride: cfg.stride.unwrap_or(0),
            warmup: cfg.warmup,
            validation_fraction: cfg.validation_fraction,
            patience: cfg.patience,
            shuffle: cfg.shuffle,
            seed: cfg.seed,
        }
    }
}
