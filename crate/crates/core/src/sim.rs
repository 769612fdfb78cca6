//! Free-running simulation and its figures of merit.
//!
//! A trained one-step predictor becomes a simulator by feeding its own
//! output back as the next y input: after a measured warmup prefix the
//! model sees only the exogenous inputs u. Everything here works in
//! physical units — rows are normalized on the way into the model and
//! denormalized on the way out — so accuracy numbers refer to the actual
//! signals.
//!
//! Accuracy is the per-channel-σ normalized root mean square error over
//! the predicted horizon: predicting each channel's mean scores exactly
//! 1.0 per channel (√m over m channels); 0 is perfect.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::data::{CsvSchema, Dataset, NormalizationStats, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One free-running pass over one (possibly concatenated) trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub id: String,
    pub ts: f64,
    /// First predicted sample index; rows before it replay measured y.
    pub start: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub inputs: Vec<f64>,
    pub measured: Vec<f64>,
    /// Same layout as `measured`; NaN from `diverged_at` onward.
    pub predicted: Vec<f64>,
    /// Sample index where the feedback loop left the finite range.
    pub diverged_at: Option<usize>,
}

impl SimulationResult {
    pub fn len(&self) -> usize {
        self.measured.len() / self.output_dim
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }

    /// Measured rows of the predicted horizon.
    pub fn horizon_measured(&self) -> &[f64] {
        &self.measured[self.start * self.output_dim..]
    }

    /// Predicted rows of the predicted horizon.
    pub fn horizon_predicted(&self) -> &[f64] {
        &self.predicted[self.start * self.output_dim..]
    }

    /// NRMSE over the predicted horizon (NaN after divergence).
    pub fn nrmse(&self) -> Result<f64> {
        nrmse(self.horizon_measured(), self.horizon_predicted(), self.output_dim)
    }
}

/// σ-normalized RMSE between aligned row-major series. Channel deviations
/// are scaled by the measured series' per-channel population σ, squared
/// errors are summed over channels and averaged over samples only, so m
/// mean-predicted channels score √m.
pub fn nrmse(measured: &[f64], predicted: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(Error::InvalidArg("nrmse needs at least one channel".into()));
    }
    if measured.len() != predicted.len() || measured.len() % dim != 0 {
        return Err(Error::InvalidArg(format!(
            "nrmse buffers disagree: {} vs {} values for {} channels",
            measured.len(),
            predicted.len(),
            dim
        )));
    }
    let n = measured.len() / dim;
    if n < 2 {
        return Err(Error::InvalidArg(format!(
            "nrmse over {n} samples is meaningless (need >= 2)"
        )));
    }
    let mut sigma = vec![0.0; dim];
    for c in 0..dim {
        let mut mean = 0.0;
        for i in 0..n {
            mean += measured[i * dim + c];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = measured[i * dim + c] - mean;
            var += d * d;
        }
        let sd = (var / n as f64).sqrt();
        if sd < 1e-12 {
            return Err(Error::DegenerateChannel {
                channel: c.to_string(),
                context: "measured signal is constant over the evaluation horizon".into(),
            });
        }
        sigma[c] = sd;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for c in 0..dim {
            let d = (measured[i * dim + c] - predicted[i * dim + c]) / sigma[c];
            acc += d * d;
        }
    }
    Ok((acc / n as f64).sqrt())
}

/// Run the model as a simulator over one trajectory: feed `warmup`
/// measured samples, then free-run on predictions and measured u alone.
/// If the feedback loop produces a non-finite value the remaining rows
/// are NaN and `diverged_at` records where.
pub fn free_run(
    model: &Model,
    norm: &NormalizationStats,
    traj: &Trajectory,
    warmup: usize,
) -> Result<SimulationResult> {
    let spec = model.spec();
    let (ny, nu) = (spec.output_dim, spec.input_dim);
    if traj.input_dim() != nu || traj.output_dim() != ny {
        return Err(Error::InvalidArg(format!(
            "trajectory '{}' has {}+{} channels, model expects {}+{}",
            traj.id(),
            traj.input_dim(),
            traj.output_dim(),
            nu,
            ny
        )));
    }
    if warmup < spec.min_prefix() {
        return Err(Error::InvalidArg(format!(
            "warmup {warmup} is below the model's minimum context {} ({} needs that many \
             measured samples before its first prediction)",
            spec.min_prefix(),
            spec.kind
        )));
    }
    if traj.len() < warmup + 1 {
        return Err(Error::TrajectoryTooShort {
            id: traj.id().to_string(),
            len: traj.len(),
            needed: warmup + 1,
        });
    }

    let n = traj.len();
    let row2 = |vals: Vec<f64>, d: usize| Tensor::from_vec(vec![1, d], vals);
    let mut predicted = Vec::with_capacity(n * ny);
    for k in 0..warmup {
        predicted.extend_from_slice(traj.output_row(k));
    }

    let mut state = model.init_state(1);
    for k in 0..warmup.saturating_sub(1) {
        let y = row2(norm.normalize_y(traj.output_row(k)), ny)?;
        let u = row2(norm.normalize_u(traj.input_row(k)), nu)?;
        state = model.observe(state, &y, &u)?;
    }

    let mut diverged_at = None;
    let mut y_feed = norm.normalize_y(traj.output_row(warmup - 1));
    for k in warmup - 1..n - 1 {
        let y = row2(y_feed.clone(), ny)?;
        let u = row2(norm.normalize_u(traj.input_row(k)), nu)?;
        let (next, pred) = model.predict_one_step(state, &y, &u)?;
        state = next;
        let vals = pred.values();
        if !vals.iter().all(|v| v.is_finite()) {
            diverged_at = Some(k + 1);
            predicted.resize(n * ny, f64::NAN);
            break;
        }
        predicted.extend(norm.denormalize_y(vals));
        y_feed = vals.to_vec();
    }

    Ok(SimulationResult {
        id: traj.id().to_string(),
        ts: traj.ts(),
        start: warmup,
        input_dim: nu,
        output_dim: ny,
        inputs: traj.inputs().to_vec(),
        measured: traj.outputs().to_vec(),
        predicted,
        diverged_at,
    })
}

/// Accuracy of one trajectory's free run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub id: String,
    pub nrmse: f64,
    pub predicted_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_trajectory: Vec<TrajectoryEval>,
    /// Mean per-trajectory NRMSE, or the pooled value in concatenated mode.
    pub aggregate: f64,
    pub simulations: Vec<SimulationResult>,
}

/// Free-run every trajectory independently (state reset between them) and
/// average the per-trajectory NRMSEs.
pub fn evaluate_per_trajectory(
    model: &Model,
    norm: &NormalizationStats,
    data: &Dataset,
    warmup: usize,
) -> Result<EvalReport> {
    let mut per_trajectory = Vec::with_capacity(data.len());
    let mut simulations = Vec::with_capacity(data.len());
    for traj in &data.trajectories {
        let sim = free_run(model, norm, traj, warmup)?;
        let score = match sim.diverged_at {
            Some(_) => f64::NAN,
            None => sim.nrmse()?,
        };
        per_trajectory.push(TrajectoryEval {
            id: sim.id.clone(),
            nrmse: score,
            predicted_samples: sim.len() - sim.start,
        });
        simulations.push(sim);
    }
    let aggregate =
        per_trajectory.iter().map(|t| t.nrmse).sum::<f64>() / per_trajectory.len() as f64;
    Ok(EvalReport { per_trajectory, aggregate, simulations })
}

/// Treat the whole dataset as one uninterrupted stream: warm up once,
/// then free-run across trajectory joins without touching the state.
/// This is a diagnostic for deployment-style operation; pass
/// `reset_at_joins` to re-warm at each join instead (per-trajectory
/// behaviour with a single pooled NRMSE).
pub fn evaluate_concatenated(
    model: &Model,
    norm: &NormalizationStats,
    data: &Dataset,
    warmup: usize,
    reset_at_joins: bool,
) -> Result<EvalReport> {
    if reset_at_joins {
        let mut pooled_meas = Vec::new();
        let mut pooled_pred = Vec::new();
        let mut simulations = Vec::new();
        for traj in &data.trajectories {
            let sim = free_run(model, norm, traj, warmup)?;
            pooled_meas.extend_from_slice(sim.horizon_measured());
            pooled_pred.extend_from_slice(sim.horizon_predicted());
            simulations.push(sim);
        }
        let diverged = simulations.iter().any(|s| s.diverged_at.is_some());
        let aggregate = if diverged {
            f64::NAN
        } else {
            nrmse(&pooled_meas, &pooled_pred, data.output_dim())?
        };
        let per_trajectory = vec![TrajectoryEval {
            id: "concatenated".into(),
            nrmse: aggregate,
            predicted_samples: pooled_meas.len() / data.output_dim(),
        }];
        return Ok(EvalReport { per_trajectory, aggregate, simulations });
    }

    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for traj in &data.trajectories {
        inputs.extend_from_slice(traj.inputs());
        outputs.extend_from_slice(traj.outputs());
    }
    let joined = Trajectory::new(
        "concatenated",
        data.ts(),
        data.input_dim(),
        data.output_dim(),
        inputs,
        outputs,
    )?;
    let sim = free_run(model, norm, &joined, warmup)?;
    let aggregate = match sim.diverged_at {
        Some(_) => f64::NAN,
        None => sim.nrmse()?,
    };
    let per_trajectory = vec![TrajectoryEval {
        id: sim.id.clone(),
        nrmse: aggregate,
        predicted_samples: sim.len() - sim.start,
    }];
    Ok(EvalReport { per_trajectory, aggregate, simulations: vec![sim] })
}

/// Write a simulation as `t,<u...>,<y>_measured...,<y>_predicted...`.
pub fn export_simulation(path: &Path, sim: &SimulationResult, schema: &CsvSchema) -> Result<()> {
    if schema.input_names.len() != sim.input_dim || schema.output_names.len() != sim.output_dim {
        return Err(Error::InvalidArg("schema does not match simulation dims".into()));
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::data(path, None, e.to_string()))?;
    let mut header = vec!["t".to_string()];
    header.extend(schema.input_names.iter().cloned());
    header.extend(schema.output_names.iter().map(|n| format!("{n}_measured")));
    header.extend(schema.output_names.iter().map(|n| format!("{n}_predicted")));
    writer.write_record(&header).map_err(|e| Error::data(path, None, e.to_string()))?;
    for i in 0..sim.len() {
        let mut record = Vec::with_capacity(header.len());
        record.push(format!("{}", i as f64 * sim.ts));
        for c in 0..sim.input_dim {
            record.push(format!("{}", sim.inputs[i * sim.input_dim + c]));
        }
        for c in 0..sim.output_dim {
            record.push(format!("{}", sim.measured[i * sim.output_dim + c]));
        }
        for c in 0..sim.output_dim {
            record.push(format!("{}", sim.predicted[i * sim.output_dim + c]));
        }
        writer.write_record(&record).map_err(|e| Error::data(path, None, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ── evaluation reports ───────────────────────────────────────────────

/// One line of a cross-run comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub arch: String,
    pub strategy: String,
    pub nrmse: f64,
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::data(path, None, e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::data(path, None, e.to_string()))?;
    }
    // serialize() writes the header lazily; an empty report still needs one
    if rows.is_empty() {
        writer
            .write_record(["dataset", "arch", "strategy", "nrmse"])
            .map_err(|e| Error::data(path, None, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::data(path, None, e.to_string()))?;
    let mut rows = Vec::new();
    for (idx, record) in reader.deserialize().enumerate() {
        let row: ReportRow =
            record.map_err(|e| Error::data(path, Some(idx + 1), e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}
