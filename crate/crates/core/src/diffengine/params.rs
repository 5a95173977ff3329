//! Named parameter collections and the checkpoint format.
//!
//! A checkpoint is a pair of files: `checkpoint.bin`, the concatenation of
//! every parameter's 64-bit little-endian values in manifest order, and
//! `manifest.json` recording name, shape and byte offset per tensor plus an
//! opaque architecture descriptor supplied by the model.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};

use super::tensor::Tensor;

/// Ordered map of parameter name to leaf tensor. Iteration order is the
/// insertion order, which fixes the checkpoint layout.
#[derive(Default)]
pub struct ParamSet {
    order: Vec<String>,
    by_name: HashMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TcsError::InvalidInput(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.order.push(name.clone());
        self.by_name.insert(name, tensor);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.order.retain(|n| n != name);
        self.by_name.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order
            .iter()
            .map(|n| (n.as_str(), &self.by_name[n]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }

    /// A shallow union; both sets keep handles to the same storage.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter().chain(other.iter()) {
            out.insert(n, t.clone())?;
        }
        Ok(out)
    }

    /// Order-independent fingerprint of the parameter values, used to
    /// verify that an operation left a subset of weights untouched.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.bytes() {
                acc = (acc ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.values().iter() {
                acc = (acc ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's first value within `checkpoint.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Architecture descriptor owned by the model layer; the parameter
    /// machinery treats it as opaque.
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Write `checkpoint.bin` + `manifest.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, arch: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TcsError::io(dir, e))?;
    let bin_path = dir.join("checkpoint.bin");
    let manifest_path = dir.join("manifest.json");

    let mut records = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::with_capacity(params.value_count() * 8);
    for (name, t) in params.iter() {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape(),
            offset: blob.len() as u64,
        });
        for v in t.values().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        arch,
        tensors: records,
    };
    std::fs::File::create(&bin_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(|e| TcsError::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    std::fs::write(&manifest_path, json).map_err(|e| TcsError::io(&manifest_path, e))?;
    Ok(())
}

/// Raw checkpoint contents: named value arrays plus the arch descriptor.
pub struct LoadedCheckpoint {
    pub arch: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl LoadedCheckpoint {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

/// Read a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let bin_path = dir.join("checkpoint.bin");
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| TcsError::io(&manifest_path, e))?;
        serde_json::from_str(&text).map_err(|e| TcsError::Malformed {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?
    };
    if manifest.format_version != 1 {
        return Err(TcsError::Malformed {
            path: manifest_path.display().to_string(),
            message: format!("unsupported format_version {}", manifest.format_version),
        });
    }
    let mut blob = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| TcsError::io(&bin_path, e))?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(TcsError::Malformed {
                path: bin_path.display().to_string(),
                message: format!(
                    "tensor `{}` runs past end of file ({} > {})",
                    rec.name,
                    end,
                    blob.len()
                ),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&rec.shape), data).map_err(|e| {
            TcsError::Malformed {
                path: bin_path.display().to_string(),
                message: format!("tensor `{}`: {e}", rec.name),
            }
        })?;
        tensors.push((rec.name.clone(), arr));
    }
    Ok(LoadedCheckpoint {
        arch: manifest.arch,
        tensors,
    })
}
