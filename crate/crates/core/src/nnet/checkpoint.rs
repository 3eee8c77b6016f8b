//! Checkpoint file: one line of JSON manifest, a newline, then one blob of
//! little-endian tensor data. Every manifest entry records its byte offset
//! into the blob, so readers never depend on entry order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::weights::{Param, Weights};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "rvt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Value,
    Moment1,
    Moment2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub slot: Slot,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Real>(weights: &Weights<T>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in weights.params() {
        for (slot, t) in [(Slot::Value, &p.value), (Slot::Moment1, &p.m), (Slot::Moment2, &p.v)] {
            tensors.push(TensorEntry {
                name: name.clone(),
                slot,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: blob.len() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut blob);
            }
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        step: weights.step,
        blob_bytes: blob.len() as u64,
        tensors,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Weights<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint has no manifest line".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a checkpoint: {}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[nl + 1..];
    if (blob.len() as u64) < manifest.blob_bytes {
        return Err(Error::Truncated {
            needed: manifest.blob_bytes,
            available: blob.len() as u64,
        });
    }

    let read = |e: &TensorEntry| -> Result<Tensor<T>> {
        if e.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} stored as {}, requested {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * T::BYTES;
        if end > blob.len() {
            return Err(Error::Truncated {
                needed: end as u64,
                available: blob.len() as u64,
            });
        }
        let data = blob[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&e.shape, data)
    };

    let mut weights = Weights::new();
    weights.step = manifest.step;
    let mut pending: std::collections::BTreeMap<&str, [Option<Tensor<T>>; 3]> = Default::default();
    for e in &manifest.tensors {
        let slot = match e.slot {
            Slot::Value => 0,
            Slot::Moment1 => 1,
            Slot::Moment2 => 2,
        };
        pending.entry(&e.name).or_default()[slot] = Some(read(e)?);
    }
    for (name, [value, m, v]) in pending {
        let value = value.ok_or_else(|| Error::Format(format!("tensor {name} has no value")))?;
        let m = m.unwrap_or_else(|| Tensor::zeros(value.shape()));
        let v = v.unwrap_or_else(|| Tensor::zeros(value.shape()));
        weights.insert_param(name, Param { value, m, v })?;
    }
    Ok(weights)
}

pub fn save<T: Real>(weights: &Weights<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(weights)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Weights<T>> {
    decode(&std::fs::read(path)?)
}
