//! On-disk checkpoints.
//!
//! A checkpoint is a directory with `manifest.json` and `tensors.bin`. The
//! blob holds every tensor as little-endian `f32`, back to back, in manifest
//! order: model parameters first, then Adam moments named `adam.m/<param>`
//! and `adam.v/<param>`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelWeights};
use crate::data::Tokenizer;
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_FORMAT: &str = "matcomp-checkpoint/1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub adam: AdamConfig,
    pub step: u64,
    /// Parameters the moments belong to, in update order.
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub tokenizer: String,
    pub step: u64,
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerManifest>,
    /// Free-form run information (training configuration, seeds).
    pub metadata: serde_json::Value,
}

/// Optimizer state saved with a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub params: Vec<String>,
    pub state: AdamState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub weights: ModelWeights<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(step: u64, weights: ModelWeights<f32>) -> Self {
        Self {
            step,
            weights,
            optimizer: None,
            metadata: serde_json::Value::Null,
        }
    }

    /// Fails unless the stored model matches `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<(), ModelError> {
        if self.weights.config() != expected {
            return Err(ModelError::ConfigMismatch {
                expected: Box::new(*expected),
                got: Box::new(*self.weights.config()),
            });
        }
        Ok(())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<CheckpointManifest, ModelError> {
    let mut named: Vec<(String, &Tensor<f32>)> = ckpt.weights.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        for (name, m) in opt.params.iter().zip(&opt.state.first_moment) {
            named.push((format!("adam.m/{name}"), m));
        }
        for (name, v) in opt.params.iter().zip(&opt.state.second_moment) {
            named.push((format!("adam.v/{name}"), v));
        }
        OptimizerManifest {
            adam: opt.state.config,
            step: opt.state.step,
            params: opt.params.clone(),
        }
    });
    if let Some(opt) = &ckpt.optimizer {
        if opt.params.len() != opt.state.first_moment.len() || opt.params.len() != opt.state.second_moment.len() {
            return Err(ModelError::Checkpoint("optimizer moments do not match parameter list".into()));
        }
    }

    let total: usize = named.iter().map(|(_, t)| t.len() * 4).sum();
    let mut blob = Vec::with_capacity(total);
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        model: *ckpt.weights.config(),
        tokenizer: Tokenizer::CONVENTION.into(),
        step: ckpt.step,
        dtype: "f32".into(),
        byte_order: "little".into(),
        tensors,
        optimizer,
        metadata: ckpt.metadata.clone(),
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(io(&manifest_path))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bad = |msg: String| Err(ModelError::Checkpoint(msg));
    if manifest.format != CHECKPOINT_FORMAT {
        return bad(format!("unsupported format '{}'", manifest.format));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return bad(format!("unsupported encoding {} / {}", manifest.dtype, manifest.byte_order));
    }
    if manifest.tokenizer != Tokenizer::CONVENTION {
        return bad(format!("tokenizer convention '{}' is not supported", manifest.tokenizer));
    }
    manifest.model.validate()?;

    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
    let mut tensors = IndexMap::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.length as usize);
        if e.dtype != "f32" || len != count * 4 || start.checked_add(len).is_none_or(|end| end > blob.len()) {
            return bad(format!("entry '{}' is inconsistent with the blob", e.name));
        }
        let data = blob[start..start + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return bad(format!("duplicate entry '{}'", e.name));
        }
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            let mut first = Vec::with_capacity(opt.params.len());
            let mut second = Vec::with_capacity(opt.params.len());
            for name in &opt.params {
                for (prefix, out) in [("adam.m/", &mut first), ("adam.v/", &mut second)] {
                    let key = format!("{prefix}{name}");
                    match tensors.shift_remove(&key) {
                        Some(t) => out.push(t),
                        None => return Err(ModelError::MissingTensor(key)),
                    }
                }
            }
            Some(OptimizerSnapshot {
                params: opt.params.clone(),
                state: AdamState {
                    config: opt.adam,
                    step: opt.step,
                    first_moment: first,
                    second_moment: second,
                },
            })
        }
    };
    let weights = ModelWeights::from_tensors(manifest.model, tensors)?;
    if let Some(opt) = &optimizer {
        for (name, m) in opt.params.iter().zip(&opt.state.first_moment) {
            if weights.get(name)?.shape() != m.shape() {
                return bad(format!("optimizer moment for '{name}' has the wrong shape"));
            }
        }
    }
    Ok(Checkpoint {
        step: manifest.step,
        weights,
        optimizer,
        metadata: manifest.metadata,
    })
}
