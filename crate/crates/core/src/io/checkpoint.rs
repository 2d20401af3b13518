use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{InitRecord, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::losses::{MatchabilityGate, TrainState};
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and schedule state needed to resume training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSnapshot {
    /// Epochs completed.
    pub epoch: usize,
    /// Learning rate of the last completed epoch.
    pub lr: f64,
    pub gate_open: bool,
    pub momenta: BTreeMap<String, Vec<f64>>,
    pub init_seed: u64,
    pub train_seed: u64,
}

impl TrainingSnapshot {
    pub fn from_state(state: &TrainState, lr: f64, init_seed: u64, train_seed: u64) -> Self {
        Self { epoch: state.epoch, lr, gate_open: state.gate.open, momenta: state.sgd.velocity.clone(), init_seed, train_seed }
    }

    pub fn to_state(&self) -> TrainState {
        let mut state = TrainState { epoch: self.epoch, gate: MatchabilityGate { open: self.gate_open }, ..Default::default() };
        state.sgd.velocity = self.momenta.clone();
        state
    }
}

/// Model configuration, weights and training state. Tensors are stored as
/// little-endian `f32`, so a reload reproduces the weights up to `f32`
/// rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub train: TrainingSnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Momentum,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// In floats from the start of the blob.
    offset: usize,
    length: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    init: Option<InitRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    epoch: usize,
    lr: f64,
    gate_open: bool,
    init_seed: u64,
    train_seed: u64,
    blob_floats: usize,
    tensors: Vec<TensorEntry>,
}

/// One JSON manifest line, a newline, then the tensor blob.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::with_capacity(4 * ckpt.params.num_scalars());
    let mut tensors = Vec::new();
    let mut push = |name: &str, group, shape: Vec<usize>, data: &[f64], init| {
        tensors.push(TensorEntry { name: name.to_string(), group, shape, offset: blob.len() / 4, length: data.len(), init });
        for &v in data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for (name, p) in ckpt.params.iter() {
        push(name, Group::Param, p.tensor.shape().to_vec(), p.tensor.data(), Some(p.init));
    }
    for (name, v) in &ckpt.train.momenta {
        push(name, Group::Momentum, vec![v.len()], v, None);
    }
    let t = &ckpt.train;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: ckpt.model.clone(),
        epoch: t.epoch,
        lr: t.lr,
        gate_open: t.gate_open,
        init_seed: t.init_seed,
        train_seed: t.train_seed,
        blob_floats: blob.len() / 4,
        tensors,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::invalid("checkpoint has no manifest line"))?;
    let head: serde_json::Value = serde_json::from_slice(&bytes[..split])?;
    let found = head.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::invalid("manifest lacks format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch { found: found as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(head)?;
    let blob = &bytes[split + 1..];
    let expected = 4 * manifest.blob_floats;
    if blob.len() < expected {
        return Err(Error::TruncatedBlob { expected, found: blob.len() });
    }
    if blob.len() > expected {
        return Err(Error::shape(format!("blob holds {} bytes, manifest declares {expected}", blob.len())));
    }
    let read = |e: &TensorEntry| -> Result<Vec<f64>> {
        if e.shape.iter().product::<usize>() != e.length || e.offset + e.length > manifest.blob_floats {
            return Err(Error::shape(format!("tensor `{}` does not fit its shape or the blob", e.name)));
        }
        Ok(blob[4 * e.offset..4 * (e.offset + e.length)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };

    let model = Model::new(manifest.model.clone())?;
    let reference = model.init_params(0)?;
    let mut params = ParamStore::new();
    let mut momenta = BTreeMap::new();
    for e in &manifest.tensors {
        let data = read(e)?;
        match e.group {
            Group::Param => {
                let want = reference.get(&e.name).ok_or_else(|| Error::shape(format!("unexpected parameter `{}`", e.name)))?;
                if want.shape() != e.shape.as_slice() {
                    return Err(Error::shape(format!("parameter `{}` has shape {:?}, model expects {:?}", e.name, e.shape, want.shape())));
                }
                let init = e.init.ok_or_else(|| Error::invalid(format!("parameter `{}` lacks its init record", e.name)))?;
                params.insert(&e.name, Tensor::new(e.shape.clone(), data)?, init);
            }
            Group::Momentum => {
                momenta.insert(e.name.clone(), data);
            }
        }
    }
    if params.len() != reference.len() {
        return Err(Error::shape(format!("checkpoint has {} parameters, model expects {}", params.len(), reference.len())));
    }
    for (name, v) in &momenta {
        if params.get(name).map(Tensor::len) != Some(v.len()) {
            return Err(Error::shape(format!("momentum `{name}` does not match a parameter")));
        }
    }
    let train = TrainingSnapshot {
        epoch: manifest.epoch,
        lr: manifest.lr,
        gate_open: manifest.gate_open,
        momenta,
        init_seed: manifest.init_seed,
        train_seed: manifest.train_seed,
    };
    Ok(Checkpoint { model: manifest.model, params, train })
}
