//! Continuous-time plants and their fixed-step RK4 integration under
//! zero-order-hold inputs.
//!
//! A plant is ẋ = f(x, u), y = g(x, u). Sampling at T_s holds u constant
//! over each interval and splits it into RK4 substeps of length ≈ `dt`.
//! The registry exposes three named plants used by the synthetic
//! benchmarks: a first-order linear system, a two-state nonlinear
//! actuator, and a damped forced oscillator.

use crate::data::Trajectory;
use crate::error::{Error, Result};

type DriftFn = fn(x: &[f64], u: &[f64], dx: &mut [f64]);
type OutputFn = fn(x: &[f64], u: &[f64], y: &mut [f64]);

/// A continuous-time system plus the metadata needed to sample it.
#[derive(Clone)]
pub struct PlantSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Default sampling time for generated benchmarks (seconds).
    pub ts: f64,
    /// Target RK4 substep; the integrator uses T_s / round(T_s / dt).
    pub dt: f64,
    /// Integration aborts when any |x_i| exceeds this.
    pub divergence_bound: f64,
    /// Admissible range per input channel.
    pub input_limits: Vec<(f64, f64)>,
    /// Box from which initial states are drawn.
    pub x0_low: Vec<f64>,
    pub x0_high: Vec<f64>,
    pub input_names: Vec<&'static str>,
    pub output_names: Vec<&'static str>,
    pub drift: DriftFn,
    pub output: OutputFn,
}

impl std::fmt::Debug for PlantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .field("ts", &self.ts)
            .field("dt", &self.dt)
            .finish_non_exhaustive()
    }
}

impl PlantSpec {
    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec(format!("plant '{}': zero dimension", self.name)));
        }
        if !(self.ts > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "plant '{}': ts and dt must be positive",
                self.name
            )));
        }
        if self.input_limits.len() != self.input_dim
            || self.x0_low.len() != self.state_dim
            || self.x0_high.len() != self.state_dim
            || self.input_names.len() != self.input_dim
            || self.output_names.len() != self.output_dim
        {
            return Err(Error::InvalidSpec(format!(
                "plant '{}': metadata lengths do not match dims",
                self.name
            )));
        }
        Ok(())
    }
}

/// Integrate `plant` for `n` samples at sampling time `ts`, holding each
/// input row constant over its interval (zero-order hold). Row `i` of the
/// result is y_i = g(x_i, u_i) with x_0 = `x0`; u_i then drives the state
/// from sample i to i+1. The input slice is row-major n × input_dim.
pub fn integrate_plant(plant: &PlantSpec, x0: &[f64], u: &[f64], ts: f64, n: usize) -> Result<Trajectory> {
    plant.validate()?;
    if x0.len() != plant.state_dim {
        return Err(Error::InvalidArg(format!(
            "initial state has {} entries, plant '{}' has {} states",
            x0.len(),
            plant.name,
            plant.state_dim
        )));
    }
    if u.len() != n * plant.input_dim {
        return Err(Error::InvalidArg(format!(
            "input buffer has {} values, expected {} ({} samples x {} channels)",
            u.len(),
            n * plant.input_dim,
            n,
            plant.input_dim
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArg(format!("need at least 2 samples, got {n}")));
    }
    if ts < plant.dt {
        return Err(Error::InvalidArg(format!(
            "sampling time {ts} is finer than the integration step {} of plant '{}'",
            plant.dt, plant.name
        )));
    }
    let substeps = (ts / plant.dt).round().max(1.0) as usize;
    let h = ts / substeps as f64;

    let sd = plant.state_dim;
    let mut x = x0.to_vec();
    let mut outputs = Vec::with_capacity(n * plant.output_dim);
    let mut y = vec![0.0; plant.output_dim];
    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![0.0; sd], vec![0.0; sd], vec![0.0; sd], vec![0.0; sd]);
    let mut xt = vec![0.0; sd];

    for step in 0..n {
        let u_row = &u[step * plant.input_dim..(step + 1) * plant.input_dim];
        (plant.output)(&x, u_row, &mut y);
        outputs.extend_from_slice(&y);
        if step + 1 == n {
            break; // last input only shapes the last output row
        }
        for _ in 0..substeps {
            (plant.drift)(&x, u_row, &mut k1);
            for i in 0..sd {
                xt[i] = x[i] + 0.5 * h * k1[i];
            }
            (plant.drift)(&xt, u_row, &mut k2);
            for i in 0..sd {
                xt[i] = x[i] + 0.5 * h * k2[i];
            }
            (plant.drift)(&xt, u_row, &mut k3);
            for i in 0..sd {
                xt[i] = x[i] + h * k3[i];
            }
            (plant.drift)(&xt, u_row, &mut k4);
            for i in 0..sd {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() || norm > plant.divergence_bound {
            return Err(Error::PlantDiverged { step: step + 1, norm });
        }
    }

    Trajectory::new(
        format!("{}-sim", plant.name),
        ts,
        plant.input_dim,
        plant.output_dim,
        u.to_vec(),
        outputs,
    )
}

// ── registry ─────────────────────────────────────────────────────────

fn linear1_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = -x[0] + u[0];
}

fn identity_output(x: &[f64], _u: &[f64], y: &mut [f64]) {
    y.copy_from_slice(x);
}

/// Two-state actuator: a chamber pressure filled/vented by two commands
/// (bilinear in input x state) driving a spring-return position through a
/// saturating characteristic. Strongly nonlinear in both state equations.
fn valve2_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    let (p, s) = (x[0], x[1]);
    let supply = 2.0;
    // filling/venting commands, a small leak, and outflow through the
    // valve itself (the measured flow), which couples the states
    dx[0] = 0.5 * u[0] * (supply - p) - 0.5 * u[1] * p - 0.02 * p - 1.2 * s * p.max(0.0).sqrt();
    let cmd = sigmoid(8.0 * (p - 1.0));
    dx[1] = 1.2 * (cmd - s);
}

/// Measured flow through the valve (orifice law): opening x pressure head.
/// Neither internal state is observable from a single sample, so a model
/// must reconstruct them from the output history.
fn valve2_output(x: &[f64], _u: &[f64], y: &mut [f64]) {
    y[0] = x[1] * x[0].max(0.0).sqrt();
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn oscillator_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = -x[0] - 0.1 * x[1] + u[0];
}

fn oscillator_output(x: &[f64], _u: &[f64], y: &mut [f64]) {
    y[0] = x[0];
}

pub fn plant_names() -> &'static [&'static str] {
    &["linear1", "valve2", "oscillator"]
}

/// Look up a plant by name; the error lists the valid names.
pub fn plant(name: &str) -> Result<PlantSpec> {
    match name {
        "linear1" => Ok(PlantSpec {
            name: "linear1",
            state_dim: 1,
            input_dim: 1,
            output_dim: 1,
            ts: 0.1,
            dt: 0.02,
            divergence_bound: 1e6,
            input_limits: vec![(-1.0, 1.0)],
            x0_low: vec![-0.5],
            x0_high: vec![0.5],
            input_names: vec!["u1"],
            output_names: vec!["y1"],
            drift: linear1_drift,
            output: identity_output,
        }),
        "valve2" => Ok(PlantSpec {
            name: "valve2",
            state_dim: 2,
            input_dim: 2,
            output_dim: 1,
            ts: 0.1,
            dt: 0.02,
            divergence_bound: 1e6,
            input_limits: vec![(0.0, 1.0), (0.0, 1.0)],
            x0_low: vec![0.0, 0.0],
            x0_high: vec![1.5, 0.8],
            input_names: vec!["u1", "u2"],
            output_names: vec!["q"],
            drift: valve2_drift,
            output: valve2_output,
        }),
        "oscillator" => Ok(PlantSpec {
            name: "oscillator",
            state_dim: 2,
            input_dim: 1,
            output_dim: 1,
            ts: 0.2,
            dt: 0.02,
            divergence_bound: 1e6,
            input_limits: vec![(-1.0, 1.0)],
            x0_low: vec![-1.0, -1.0],
            x0_high: vec![1.0, 1.0],
            input_names: vec!["u1"],
            output_names: vec!["y1"],
            drift: oscillator_drift,
            output: oscillator_output,
        }),
        other => Err(Error::InvalidArg(format!(
            "unknown plant '{other}' (valid: {})",
            plant_names().join(", ")
        ))),
    }
}
