//! Trajectory and dataset containers, z-score normalization, decimating
//! resampling, and the on-disk CSV/manifest formats.
//!
//! A trajectory CSV holds one uniformly sampled record per row under the
//! header `t,<u-names...>,<y-names...>`. Values are written with Rust's
//! shortest-round-trip float formatting, so write→read is bit-exact. A
//! dataset directory is described by `manifest.toml` listing the member
//! files and their roles.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Train,
    Test,
}

impl std::fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetRole::Train => "train",
            DatasetRole::Test => "test",
        })
    }
}

/// One uniformly sampled record of (input, output) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    id: String,
    ts: f64,
    n: usize,
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,  // row-major n × input_dim
    outputs: Vec<f64>, // row-major n × output_dim
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        ts: f64,
        input_dim: usize,
        output_dim: usize,
        inputs: Vec<f64>,
        outputs: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidArg(format!(
                "trajectory '{id}': sampling time must be positive, got {ts}"
            )));
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArg(format!(
                "trajectory '{id}': channel counts must be >= 1"
            )));
        }
        if inputs.len() % input_dim != 0 || outputs.len() % output_dim != 0 {
            return Err(Error::InvalidArg(format!(
                "trajectory '{id}': buffer lengths do not divide channel counts"
            )));
        }
        let n = inputs.len() / input_dim;
        if outputs.len() / output_dim != n {
            return Err(Error::InvalidArg(format!(
                "trajectory '{id}': {} input rows vs {} output rows",
                n,
                outputs.len() / output_dim
            )));
        }
        if n < 2 {
            return Err(Error::TrajectoryTooShort { id, len: n, needed: 2 });
        }
        if !inputs.iter().chain(&outputs).all(|v| v.is_finite()) {
            return Err(Error::InvalidArg(format!(
                "trajectory '{id}': non-finite sample"
            )));
        }
        Ok(Trajectory { id, ts, n, input_dim, output_dim, inputs, outputs })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 2 by construction
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn output_row(&self, i: usize) -> &[f64] {
        &self.outputs[i * self.output_dim..(i + 1) * self.output_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
}

/// A collection of same-shaped trajectories with channel metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: DatasetRole,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub input_units: Vec<String>,
    pub output_units: Vec<String>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(
        role: DatasetRole,
        input_names: Vec<String>,
        output_names: Vec<String>,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let input_units = vec!["1".to_string(); input_names.len()];
        let output_units = vec!["1".to_string(); output_names.len()];
        Self::with_units(role, input_names, output_names, input_units, output_units, trajectories)
    }

    pub fn with_units(
        role: DatasetRole,
        input_names: Vec<String>,
        output_names: Vec<String>,
        input_units: Vec<String>,
        output_units: Vec<String>,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArg("dataset has no trajectories".into()));
        }
        if input_units.len() != input_names.len() || output_units.len() != output_names.len() {
            return Err(Error::InvalidArg("unit list length != name list length".into()));
        }
        let first = &trajectories[0];
        if first.input_dim() != input_names.len() || first.output_dim() != output_names.len() {
            return Err(Error::InvalidArg(format!(
                "channel names ({}+{}) do not match trajectory dims ({}+{})",
                input_names.len(),
                output_names.len(),
                first.input_dim(),
                first.output_dim()
            )));
        }
        let mut ids = BTreeSet::new();
        for t in &trajectories {
            if t.input_dim() != first.input_dim() || t.output_dim() != first.output_dim() {
                return Err(Error::InvalidArg(format!(
                    "trajectory '{}' has different channel counts",
                    t.id()
                )));
            }
            if (t.ts() - first.ts()).abs() > 1e-9 * first.ts() {
                return Err(Error::InvalidArg(format!(
                    "trajectory '{}' has sampling time {} (dataset uses {})",
                    t.id(),
                    t.ts(),
                    first.ts()
                )));
            }
            if !ids.insert(t.id().to_string()) {
                return Err(Error::InvalidArg(format!("duplicate trajectory id '{}'", t.id())));
            }
        }
        Ok(Dataset { role, input_names, output_names, input_units, output_units, trajectories })
    }

    pub fn ts(&self) -> f64 {
        self.trajectories[0].ts()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_names.len()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Per-channel z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Fit per-channel mean and population standard deviation over every
/// sample of the training set. Constant channels are rejected.
pub fn fit_normalizer(train: &Dataset) -> Result<NormalizationStats> {
    if train.role != DatasetRole::Train {
        return Err(Error::InvalidArg(
            "normalizer must be fitted on the train split (test leakage)".into(),
        ));
    }
    fn fit(
        train: &Dataset,
        dim: usize,
        names: &[String],
        row_of: impl for<'a> Fn(&'a Trajectory, usize) -> &'a [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        // two passes: exact mean first, then centered second moment
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for t in &train.trajectories {
            for i in 0..t.len() {
                for (m, v) in mean.iter_mut().zip(row_of(t, i)) {
                    *m += v;
                }
                count += 1;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for t in &train.trajectories {
            for i in 0..t.len() {
                for (s, (v, m)) in var.iter_mut().zip(row_of(t, i).iter().zip(&mean)) {
                    let d = v - m;
                    *s += d * d;
                }
            }
        }
        let mut std = vec![0.0; dim];
        for (k, s) in var.iter().enumerate() {
            let sd = (s / count as f64).sqrt();
            if sd < 1e-12 {
                return Err(Error::DegenerateChannel {
                    channel: names[k].clone(),
                    context: "normalization fit on training data".into(),
                });
            }
            std[k] = sd;
        }
        Ok((mean, std))
    }
    let (u_mean, u_std) = fit(train, train.input_dim(), &train.input_names, Trajectory::input_row)?;
    let (y_mean, y_std) =
        fit(train, train.output_dim(), &train.output_names, Trajectory::output_row)?;
    Ok(NormalizationStats { u_mean, u_std, y_mean, y_std })
}

impl NormalizationStats {
    pub fn normalize_u(&self, row: &[f64]) -> Vec<f64> {
        zscore(row, &self.u_mean, &self.u_std)
    }

    pub fn normalize_y(&self, row: &[f64]) -> Vec<f64> {
        zscore(row, &self.y_mean, &self.y_std)
    }

    pub fn denormalize_y(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Z-score a whole dataset (both channels groups), keeping metadata.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = Vec::with_capacity(data.len());
        for t in &data.trajectories {
            let mut inputs = Vec::with_capacity(t.len() * t.input_dim());
            let mut outputs = Vec::with_capacity(t.len() * t.output_dim());
            for i in 0..t.len() {
                inputs.extend(self.normalize_u(t.input_row(i)));
                outputs.extend(self.normalize_y(t.output_row(i)));
            }
            out.push(Trajectory::new(
                t.id(),
                t.ts(),
                t.input_dim(),
                t.output_dim(),
                inputs,
                outputs,
            )?);
        }
        Dataset::with_units(
            data.role,
            data.input_names.clone(),
            data.output_names.clone(),
            data.input_units.clone(),
            data.output_units.clone(),
            out,
        )
    }

    /// Undo `apply` on the output channels of a predicted series.
    pub fn invert_y_series(&self, rows: &[f64], dim: usize) -> Vec<f64> {
        rows.chunks(dim).flat_map(|r| self.denormalize_y(r)).collect()
    }
}

fn zscore(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

/// Decimate a trajectory to a coarser sampling time. `new_ts` must be an
/// integer multiple k of the current T_s; a width-k moving average is
/// applied before keeping every k-th point (anti-aliasing), and a partial
/// tail is dropped.
pub fn resample(traj: &Trajectory, new_ts: f64) -> Result<Trajectory> {
    if !(new_ts.is_finite() && new_ts > 0.0) {
        return Err(Error::InvalidArg(format!("resample target {new_ts} invalid")));
    }
    let ratio = new_ts / traj.ts();
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(Error::InvalidArg(format!(
            "resample ratio {ratio} is not a positive integer (decimation only)"
        )));
    }
    let k = k as usize;
    if k == 1 {
        return Ok(traj.clone());
    }
    let n_new = traj.len() / k;
    if n_new < 2 {
        return Err(Error::TrajectoryTooShort {
            id: traj.id().to_string(),
            len: traj.len(),
            needed: 2 * k,
        });
    }
    let decimate = |flat: &[f64], dim: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_new * dim);
        for j in 0..n_new {
            for c in 0..dim {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += flat[(j * k + i) * dim + c];
                }
                out.push(acc / k as f64);
            }
        }
        out
    };
    Trajectory::new(
        traj.id(),
        new_ts,
        traj.input_dim(),
        traj.output_dim(),
        decimate(traj.inputs(), traj.input_dim()),
        decimate(traj.outputs(), traj.output_dim()),
    )
}

// ── CSV format ───────────────────────────────────────────────────────

/// Declared channel layout of a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

/// Read one trajectory from `t,<u...>,<y...>` CSV, validating the header
/// against the schema, uniform sampling, and finiteness.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Trajectory> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut expected = vec!["t".to_string()];
    expected.extend(schema.input_names.iter().cloned());
    expected.extend(schema.output_names.iter().cloned());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected {
        return Err(Error::data(
            path,
            None,
            format!("header {header:?} does not match schema {expected:?}"),
        ));
    }
    let nu = schema.input_names.len();
    let ny = schema.output_names.len();
    let mut times = Vec::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1; // 1-based data rows
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != 1 + nu + ny {
            return Err(Error::data(
                path,
                Some(row),
                format!("{} fields, expected {}", record.len(), 1 + nu + ny),
            ));
        }
        let parse = |field: usize, what: &str| -> Result<f64> {
            let raw = &record[field];
            let v: f64 = raw.parse().map_err(|_| {
                Error::data(path, Some(row), format!("{what} '{raw}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::data(path, Some(row), format!("{what} '{raw}' is not finite")));
            }
            Ok(v)
        };
        times.push(parse(0, "time")?);
        for (c, name) in schema.input_names.iter().enumerate() {
            inputs.push(parse(1 + c, name)?);
        }
        for (c, name) in schema.output_names.iter().enumerate() {
            outputs.push(parse(1 + nu + c, name)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::data(path, None, format!("{} samples, at least 2 required", times.len())));
    }
    let ts = times[1] - times[0];
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::data(path, Some(2), format!("non-increasing time axis (step {ts})")));
    }
    for (i, t) in times.iter().enumerate() {
        let expect = times[0] + i as f64 * ts;
        if (t - expect).abs() > 1e-6 * ts.max(1.0) {
            return Err(Error::data(
                path,
                Some(i + 1),
                format!("non-uniform sampling: t = {t}, expected {expect}"),
            ));
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".into());
    Trajectory::new(id, ts, nu, ny, inputs, outputs)
}

/// Write a trajectory as `t,<u...>,<y...>` with shortest-round-trip
/// float formatting (t starts at 0).
pub fn write_csv(path: &Path, traj: &Trajectory, schema: &CsvSchema) -> Result<()> {
    if schema.input_names.len() != traj.input_dim()
        || schema.output_names.len() != traj.output_dim()
    {
        return Err(Error::InvalidArg("schema does not match trajectory dims".into()));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(schema.input_names.iter().cloned());
    header.extend(schema.output_names.iter().cloned());
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..traj.len() {
        let mut record = Vec::with_capacity(header.len());
        record.push(format!("{}", i as f64 * traj.ts()));
        for v in traj.input_row(i) {
            record.push(format!("{v}"));
        }
        for v in traj.output_row(i) {
            record.push(format!("{v}"));
        }
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::data(path, Some(pos.record() as usize), e.to_string()),
        None => Error::data(path, None, e.to_string()),
    }
}

// ── dataset directory format ─────────────────────────────────────────

/// `manifest.toml` of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub ts: f64,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    #[serde(default)]
    pub input_units: Vec<String>,
    #[serde(default)]
    pub output_units: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: DatasetRole,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.toml";

/// Write both splits plus the manifest into `dir` (created if missing).
pub fn save_dataset(
    dir: &Path,
    train: &Dataset,
    test: &Dataset,
    plant: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    if train.input_names != test.input_names || train.output_names != test.output_names {
        return Err(Error::InvalidArg("train/test channel names differ".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = CsvSchema {
        input_names: train.input_names.clone(),
        output_names: train.output_names.clone(),
    };
    let mut files = Vec::new();
    for (split, role) in [(train, DatasetRole::Train), (test, DatasetRole::Test)] {
        for t in &split.trajectories {
            let name = format!("{}.csv", t.id());
            write_csv(&dir.join(&name), t, &schema)?;
            files.push(ManifestEntry { path: name, role });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        ts: train.ts(),
        input_names: train.input_names.clone(),
        output_names: train.output_names.clone(),
        input_units: train.input_units.clone(),
        output_units: train.output_units.clone(),
        plant,
        seed,
        files,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::data(dir.join(MANIFEST_NAME), None, e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), text)
        .map_err(|e| Error::io(dir.join(MANIFEST_NAME), e))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::data(&path, None, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::data(
            &path,
            None,
            format!("manifest version {} (supported: {MANIFEST_VERSION})", manifest.version),
        ));
    }
    Ok(manifest)
}

/// Load every trajectory of one role from a dataset directory.
pub fn load_dataset(dir: &Path, role: DatasetRole) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let schema = CsvSchema {
        input_names: manifest.input_names.clone(),
        output_names: manifest.output_names.clone(),
    };
    let mut trajectories = Vec::new();
    for entry in manifest.files.iter().filter(|f| f.role == role) {
        let t = load_csv(&dir.join(&entry.path), &schema)?;
        if (t.ts() - manifest.ts).abs() > 1e-9 * manifest.ts {
            return Err(Error::data(
                dir.join(&entry.path),
                None,
                format!("sampling time {} differs from manifest ts {}", t.ts(), manifest.ts),
            ));
        }
        trajectories.push(t);
    }
    if trajectories.is_empty() {
        return Err(Error::data(
            dir.join(MANIFEST_NAME),
            None,
            format!("no files with role '{role}'"),
        ));
    }
    let units_or = |units: &[String], n: usize| {
        if units.len() == n {
            units.to_vec()
        } else {
            vec!["1".to_string(); n]
        }
    };
    Dataset::with_units(
        role,
        manifest.input_names.clone(),
        manifest.output_names.clone(),
        units_or(&manifest.input_units, manifest.input_names.len()),
        units_or(&manifest.output_units, manifest.output_names.len()),
        trajectories,
    )
}

/// Where CLI artifacts land by default (see the `FREERUN_OUT` variable).
pub fn default_out_root() -> PathBuf {
    std::env::var_os("FREERUN_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
