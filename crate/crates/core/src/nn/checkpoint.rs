//! Checkpoint serialization.
//!
//! A checkpoint is a directory: `metadata.json` describes the architecture,
//! the step/epoch counters and the tensor inventory; each tensor lives in
//! its own little-endian f32 blob named after its parameter path. Optimizer
//! state rides along as tensors under the `optim.` prefix, which model
//! loading ignores. Writing the same state twice produces byte-identical
//! files, and a save/load round trip reproduces every bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::ModelSpec;
use crate::nn::tensor::Tensor;
use crate::nn::Scalar;

/// An ordered path → tensor map, the exchange format between models, the
/// optimizer and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) {
        self.map.insert(path.into(), tensor);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.map.get(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.map.remove(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (k, v) in &self.map {
            out.insert(k.clone(), v.cast());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub spec: ModelSpec,
    pub step: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

fn blob_name(path: &str) -> String {
    format!("{path}.bin")
}

/// Writes `store` under `dir` (created if needed) with the given counters.
pub fn save_checkpoint(
    dir: &Path,
    spec: &ModelSpec,
    step: u64,
    epoch: usize,
    store: &ParameterStore<f32>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors: Vec<TensorEntry> = store
        .iter()
        .map(|(path, tensor)| TensorEntry {
            path: path.clone(),
            shape: tensor.shape().to_vec(),
        })
        .collect();
    let meta = CheckpointMetadata {
        spec: spec.clone(),
        step,
        epoch,
        tensors,
    };
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("metadata.json"), json)?;
    for (path, tensor) in store.iter() {
        let mut file = fs::File::create(dir.join(blob_name(path)))?;
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a checkpoint directory back. Every tensor listed in the metadata
/// must exist with exactly the advertised volume.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMetadata, ParameterStore<f32>)> {
    let meta_path = dir.join("metadata.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
    })?;
    let meta: CheckpointMetadata = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("bad metadata in {}: {e}", dir.display())))?;
    let mut store = ParameterStore::new();
    for entry in &meta.tensors {
        let path = dir.join(blob_name(&entry.path));
        let mut file = fs::File::open(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let volume: usize = entry.shape.iter().product();
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() != volume * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for {} values",
                path.display(),
                bytes.len(),
                volume
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(entry.path.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((meta, store))
}
