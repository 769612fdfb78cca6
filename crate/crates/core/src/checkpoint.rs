//! Versioned on-disk snapshots of a trained model: architecture spec,
//! parameter tensors, the normalization fitted on its training split, and
//! the training metadata needed to reproduce or resume evaluation.
//!
//! The container is JSON. Floats are written in shortest-round-trip form,
//! so save→load restores every parameter bit-exactly. `restore` rebuilds
//! the model through the same shape validation as construction, so a
//! tampered or truncated file is rejected rather than half-loaded.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Model, ModelParams, ModelSpec};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Strategy;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// How the checkpointed model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Samples fed as measured context before free-running starts.
    pub warmup_steps: usize,
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nrmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: BTreeMap<String, SavedTensor>,
    pub norm: NormalizationStats,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(model: &Model, norm: &NormalizationStats, meta: CheckpointMeta) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    SavedTensor { shape: t.shape().to_vec(), values: t.values().to_vec() },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            params,
            norm: norm.clone(),
            meta,
        }
    }

    /// Rebuild the model, re-running all shape and finiteness validation.
    pub fn restore(&self) -> Result<Model> {
        let mut tensors = BTreeMap::new();
        for (name, saved) in &self.params {
            let t = Tensor::from_vec(saved.shape.clone(), saved.values.clone())?.with_grad();
            tensors.insert(name.clone(), t);
        }
        Model::new(self.spec.clone(), ModelParams::from_tensors(tensors)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(path, None, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::data(path, None, e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(
                path,
                None,
                format!(
                    "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                    ckpt.version
                ),
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ModelKind, ModelSpec};
    use crate::rng::SeedStream;
    use std::path::PathBuf;

    fn tempfile(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "freerun-ckpt-test-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut spec = ModelSpec::new(ModelKind::Gru, 2, 2);
        spec.hidden_sizes = vec![5, 3];
        let model = Model::init(spec, SeedStream::new(99)).unwrap();
        let norm = NormalizationStats {
            u_mean: vec![0.25, -1.5],
            u_std: vec![1.0, 3.0],
            y_mean: vec![0.1, 0.7],
            y_std: vec![0.5, 2.0],
        };
        let meta = CheckpointMeta {
            warmup_steps: 10,
            strategy: Strategy::Parallel,
            seed: 99,
            epoch: Some(17),
            val_nrmse: Some(0.321),
        };
        Checkpoint::capture(&model, &norm, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let path = tempfile("model.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt); // includes every parameter value, exactly

        let model = back.restore().unwrap();
        assert_eq!(model.spec(), &ckpt.spec);
        for (name, saved) in &ckpt.params {
            let t = model.params().get(name).unwrap();
            assert_eq!(t.values(), &saved.values[..]);
        }
    }

    #[test]
    fn save_load_save_is_stable_on_disk() {
        let ckpt = sample_checkpoint();
        let a = tempfile("a.json");
        let b = tempfile("b.json");
        ckpt.save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut ckpt = sample_checkpoint();
        ckpt.version = 99;
        let path = tempfile("future.json");
        // write without the version gate, read through it
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn tampered_parameters_fail_restore() {
        let mut ckpt = sample_checkpoint();
        let first = ckpt.params.keys().next().unwrap().clone();
        ckpt.params.get_mut(&first).unwrap().values.pop();
        assert!(ckpt.restore().is_err());

        let mut ckpt = sample_checkpoint();
        let first = ckpt.params.keys().next().unwrap().clone();
        ckpt.params.remove(&first);
        let err = ckpt.restore().unwrap_err().to_string();
        assert!(err.contains(&first), "{err}");
    }

    #[test]
    fn restored_model_predicts_identically() {
        let ckpt = sample_checkpoint();
        let path = tempfile("model.json");
        ckpt.save(&path).unwrap();
        let a = ckpt.restore().unwrap();
        let b = Checkpoint::load(&path).unwrap().restore().unwrap();

        let y = Tensor::from_vec(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let u = Tensor::from_vec(vec![1, 2], vec![0.8, 0.1]).unwrap();
        let sa = a.observe(a.init_state(1), &y, &u).unwrap();
        let sb = b.observe(b.init_state(1), &y, &u).unwrap();
        let (_, pa) = a.predict_one_step(sa, &y, &u).unwrap();
        let (_, pb) = b.predict_one_step(sb, &y, &u).unwrap();
        assert_eq!(pa.values(), pb.values());
    }
}
