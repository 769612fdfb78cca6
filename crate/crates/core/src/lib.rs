//! Learning black-box simulators of sampled nonlinear dynamical systems.
//!
//! The crate covers the whole pipeline: synthetic plant data generation,
//! one-step-ahead model architectures over a shared autodiff tape, the two
//! training strategies (series-parallel and parallel), free-running
//! simulation, and NRMSE evaluation.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod plant;
pub mod rng;
pub mod sim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use arch::{
    gru_cell, init_params, lstm_cell, mlp_forward, rnn_cell, tcn_forward, HiddenState, Model,
    ModelKind, ModelParams, ModelSpec, ParamMap, StepState, ALL_KINDS,
};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::{
    fit_normalizer, load_csv, load_dataset, resample, save_dataset, write_csv, CsvSchema, Dataset,
    DatasetRole, NormalizationStats, Trajectory,
};
pub use error::{Error, Result};
pub use plant::{integrate_plant, plant, plant_names, PlantSpec};
pub use rng::SeedStream;
pub use sim::{
    evaluate_concatenated, evaluate_per_trajectory, export_simulation, free_run, nrmse,
    read_report, write_report, EvalReport, ReportRow, SimulationResult,
};
pub use synth::{generate_test_signal, make_synthetic_benchmark, SignalConfig};
pub use tape::{finite_difference_gradient, Activation, Gradients, Tape};
pub use tensor::Tensor;
pub use train::{
    adamw_step, clip_gradients, grid_search, segment_starts, train, GridResult, GridSpec,
    OptimizerState, Strategy, TrainOutcome, TrainRecord, TrainStatus, TrainingConfig,
    ALL_STRATEGIES,
};
