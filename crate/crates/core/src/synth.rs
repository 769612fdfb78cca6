//! Excitation-signal synthesis and end-to-end synthetic benchmark
//! generation.
//!
//! Signals alternate static sections (constant holds) with dynamic ones
//! (random steps, ramps, or chirps), clamped to the plant's admissible
//! input range. Benchmarks pair many short training trajectories with a
//! few much longer test trajectories so that evaluation stresses
//! long-horizon behaviour the trainer never saw.

use rand::Rng;

use crate::data::{Dataset, DatasetRole, Trajectory};
use crate::error::{Error, Result};
use crate::plant::{integrate_plant, PlantSpec};
use crate::rng::{tags, SeedStream};

/// Shape of one excitation signal.
#[derive(Debug, Clone)]
pub struct SignalConfig {
    /// Total number of samples.
    pub n: usize,
    /// Number of alternating sections; odd-indexed sections are dynamic.
    pub sections: usize,
    /// Admissible (low, high) range per input channel.
    pub limits: Vec<(f64, f64)>,
}

/// Draw a multichannel excitation signal (row-major n × channels).
/// Sections alternate static/dynamic starting with a static hold; dynamic
/// sections pick steps, a ramp, or a chirp per channel. Every sample is
/// clamped to the channel limits.
pub fn generate_test_signal(cfg: &SignalConfig, stream: SeedStream) -> Result<Vec<f64>> {
    if cfg.sections == 0 {
        return Err(Error::InvalidArg("signal needs at least one section".into()));
    }
    if cfg.n < 2 * cfg.sections {
        return Err(Error::InvalidArg(format!(
            "{} samples cannot hold {} sections (need >= 2 per section)",
            cfg.n, cfg.sections
        )));
    }
    if cfg.limits.is_empty() {
        return Err(Error::InvalidArg("signal needs at least one channel".into()));
    }
    for &(lo, hi) in &cfg.limits {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArg(format!("invalid channel limits ({lo}, {hi})")));
        }
    }

    let channels = cfg.limits.len();
    let mut rng = stream.rng();
    let mut signal = vec![0.0; cfg.n * channels];

    // near-equal section lengths, remainder spread over the first sections
    let base = cfg.n / cfg.sections;
    let extra = cfg.n % cfg.sections;
    let mut start = 0usize;
    for section in 0..cfg.sections {
        let len = base + usize::from(section < extra);
        for (c, &(lo, hi)) in cfg.limits.iter().enumerate() {
            let mut column = vec![0.0; len];
            if section % 2 == 0 {
                column.fill(rng.random_range(lo..hi));
            } else {
                fill_dynamic(&mut column, lo, hi, &mut rng);
            }
            for (i, v) in column.into_iter().enumerate() {
                signal[(start + i) * channels + c] = v.clamp(lo, hi);
            }
        }
        start += len;
    }
    Ok(signal)
}

fn fill_dynamic(column: &mut [f64], lo: f64, hi: f64, rng: &mut impl Rng) {
    let len = column.len();
    match rng.random_range(0..3u32) {
        // random steps with holds of a few samples
        0 => {
            let mut i = 0;
            while i < len {
                let hold = rng.random_range(3..=12).min(len - i);
                let level = rng.random_range(lo..hi);
                column[i..i + hold].fill(level);
                i += hold;
            }
        }
        // linear ramp between two random levels
        1 => {
            let a = rng.random_range(lo..hi);
            let b = rng.random_range(lo..hi);
            for (i, v) in column.iter_mut().enumerate() {
                let f = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
                *v = a + (b - a) * f;
            }
        }
        // linear chirp around a random center, amplitude kept in range
        _ => {
            let width = hi - lo;
            let center = rng.random_range(lo + 0.1 * width..hi - 0.1 * width);
            let max_amp = (center - lo).min(hi - center);
            let amp = rng.random_range(0.2 * max_amp..max_amp);
            let f0 = rng.random_range(0.01..0.05); // cycles per sample
            let f1 = rng.random_range(0.05..0.25);
            for (i, v) in column.iter_mut().enumerate() {
                let t = i as f64;
                let phase =
                    std::f64::consts::TAU * (f0 * t + 0.5 * (f1 - f0) * t * t / len as f64);
                *v = center + amp * phase.sin();
            }
        }
    }
}

fn draw_x0(plant: &PlantSpec, stream: SeedStream) -> Vec<f64> {
    let mut rng = stream.rng();
    plant
        .x0_low
        .iter()
        .zip(&plant.x0_high)
        .map(|(&lo, &hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
        .collect()
}

fn sections_for(len: usize) -> usize {
    (len / 40).max(3)
}

/// Generate a paired train/test benchmark from a plant. Training
/// trajectories are short and numerous; test trajectories must be longer
/// (`test_len > train_len`) so free-running evaluation extrapolates in
/// horizon. All draws derive from `seed`; train and test use disjoint
/// substreams.
pub fn make_synthetic_benchmark(
    plant: &PlantSpec,
    n_train: usize,
    train_len: usize,
    n_test: usize,
    test_len: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArg("need at least one trajectory per split".into()));
    }
    if test_len <= train_len {
        return Err(Error::InvalidArg(format!(
            "test_len ({test_len}) must exceed train_len ({train_len}): evaluation must \
             stress longer horizons than training"
        )));
    }
    let root = SeedStream::new(seed);
    let simulate = |len: usize, sig: SeedStream, x0s: SeedStream| -> Result<Trajectory> {
        let cfg = SignalConfig {
            n: len,
            sections: sections_for(len),
            limits: plant.input_limits.clone(),
        };
        let u = generate_test_signal(&cfg, sig)?;
        let x0 = draw_x0(plant, x0s);
        integrate_plant(plant, &x0, &u, plant.ts, len)
    };

    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let t = simulate(
            train_len,
            root.derive_indexed(tags::TRAIN_SIGNALS, i as u64),
            root.derive_indexed(tags::INIT_CONDITIONS, 2 * i as u64),
        )?;
        train.push(t.with_id(format!("train_{i:03}")));
    }
    let mut test = Vec::with_capacity(n_test);
    for j in 0..n_test {
        let t = simulate(
            test_len,
            root.derive_indexed(tags::TEST_SIGNALS, j as u64),
            root.derive_indexed(tags::INIT_CONDITIONS, 2 * j as u64 + 1),
        )?;
        test.push(t.with_id(format!("test_{j:03}")));
    }

    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Ok((
        Dataset::new(
            DatasetRole::Train,
            names(&plant.input_names),
            names(&plant.output_names),
            train,
        )?,
        Dataset::new(
            DatasetRole::Test,
            names(&plant.input_names),
            names(&plant.output_names),
            test,
        )?,
    ))
}
