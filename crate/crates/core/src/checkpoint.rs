//! Checkpoint container: named little-endian `f32` arrays behind a JSON header.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"OSFLCKPT"
//! version    u32 LE    1
//! header_len u64 LE    byte length of the JSON header
//! header     JSON      CheckpointHeader (metadata + shape table)
//! payload    f32 LE    arrays concatenated in shape-table order
//! ```
//!
//! Loading validates the shape table against the payload length before any
//! array is materialised.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OSFLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture_id: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub seed: u64,
    /// Training step (or epoch) at which the checkpoint was written.
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl CheckpointMeta {
    pub fn new(architecture_id: impl Into<String>) -> Self {
        Self {
            architecture_id: architecture_id.into(),
            config: Value::Null,
            seed: 0,
            step: 0,
            extra: Map::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    tensors: Vec<ShapeEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f64::from(v)).collect()).expect("validated at load")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push(NamedArray::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` missing")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.to_tensor())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            tensors: self
                .arrays
                .iter()
                .map(|a| ShapeEntry {
                    name: a.name.clone(),
                    dtype: "f32".into(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + head.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let head_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let head_end = 20usize
            .checked_add(head_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..head_end])?;
        let mut expected = 0usize;
        let mut names = std::collections::HashSet::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("array `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate array `{}`", e.name)));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            expected = expected.checked_add(n * 4).ok_or_else(|| bad("shape overflow"))?;
        }
        let payload = &bytes[head_end..];
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "shape table describes {expected} payload bytes but {} are present",
                payload.len()
            )));
        }
        let mut offset = 0;
        let arrays = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = payload[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                offset += 4 * n;
                NamedArray {
                    name: e.name,
                    shape: e.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Snapshot a network's parameters with its configuration.
    pub fn from_network<N: Network>(net: &N, seed: u64, step: u64) -> Result<Self> {
        let mut meta = CheckpointMeta::new(net.architecture_id());
        meta.config = serde_json::to_value(net.config())?;
        meta.seed = seed;
        meta.step = step;
        let mut ck = Self::new(meta);
        for (name, t) in net.store().names().iter().zip(net.store().tensors()) {
            ck.push(name.clone(), t);
        }
        Ok(ck)
    }

    /// Rebuild a network, failing fast on architecture or shape mismatch.
    pub fn to_network<N: Network>(&self) -> Result<N> {
        let config: N::Config = serde_json::from_value(self.meta.config.clone())?;
        let mut net = N::build(&config, 0)?;
        if net.architecture_id() != self.meta.architecture_id {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint `{}`, expected `{}`",
                self.meta.architecture_id,
                net.architecture_id()
            )));
        }
        self.load_into(net.store_mut())?;
        Ok(net)
    }

    /// Copy arrays into an existing store with the same names and shapes.
    pub fn load_into(&self, store: &mut crate::params::ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, network has {}",
                self.arrays.len(),
                store.len()
            )));
        }
        let names = store.names().to_vec();
        for (name, t) in names.iter().zip(store.tensors_mut()) {
            let a = self.get(name)?;
            if a.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {:?}, network expects {:?}",
                    a.shape,
                    t.shape()
                )));
            }
            *t = a.to_tensor();
        }
        Ok(())
    }
}

/// Round a network's parameters to `f32`, matching what a checkpoint stores.
pub fn round_to_f32<N: Network>(net: &mut N) {
    for t in net.store_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ClassifierArch, ClassifierConfig, ClassifierModel, ExtractorConfig, FeatureExtractor};
    use proptest::prelude::*;

    fn classifier() -> ClassifierModel {
        ClassifierModel::build(
            &ClassifierConfig {
                arch: ClassifierArch::SmallCnn,
                input_shape: [1, 8, 8],
                num_classes: 3,
                widths: vec![2, 3, 4],
                tap_layer: 3,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn network_round_trip_is_bit_identical_after_f32_rounding() {
        let mut net = classifier();
        round_to_f32(&mut net);
        let bytes = Checkpoint::from_network(&net, 11, 5).unwrap().to_bytes().unwrap();
        let back: ClassifierModel = Checkpoint::from_bytes(&bytes).unwrap().to_network().unwrap();
        assert_eq!(back.store(), net.store());
    }

    #[test]
    fn architecture_mismatch_fails_fast() {
        let mut ck = Checkpoint::from_network(&classifier(), 0, 0).unwrap();
        ck.meta.architecture_id = "something-else".into();
        assert!(matches!(ck.to_network::<ClassifierModel>(), Err(Error::Checkpoint(_))));
        let ex = FeatureExtractor::build(&ExtractorConfig { image_shape: [1, 8, 8], kernel: 3 }, 0).unwrap();
        let ck = Checkpoint::from_network(&ex, 0, 0).unwrap();
        assert!(ck.to_network::<ClassifierModel>().is_err());
    }

    #[test]
    fn truncated_payload_is_rejected_before_materialising() {
        let bytes = Checkpoint::from_network(&classifier(), 0, 0).unwrap().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(values in prop::collection::vec(-1e6f32..1e6, 0..64), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            let mut ck = Checkpoint::new(CheckpointMeta::new("test"));
            ck.arrays.push(NamedArray { name: "a".into(), shape: vec![rows, n / rows], data: values[..n].to_vec() });
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
