//! Run artifacts on disk. Layout:
//!
//! ```text
//! bytes 0..4    magic "KDDT"
//! bytes 4..8    format version, u32 little-endian (currently 1)
//! bytes 8..16   header length H, u64 little-endian
//! bytes 16..16+H  UTF-8 JSON header
//! rest          tensor payload, little-endian 64-bit reals
//! ```
//!
//! The header carries the run config, the model shape, the frozen point set
//! when one was used, final metrics, and a name-sorted table mapping each
//! tensor to its shape and byte range in the payload. Saving is
//! deterministic, so load followed by save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Metrics, RunConfig};
use crate::model::{DetrModel, ModelConfig};
use crate::points::DistillationPointSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KDDT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
    /// Byte length of the tensor's data.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    model: ModelConfig,
    point_set: Option<DistillationPointSet>,
    metrics: Metrics,
    tensors: BTreeMap<String, TensorEntry>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    /// Shape of the model whose weights are stored; for student runs this
    /// already includes any extra plain queries.
    pub model: ModelConfig,
    pub point_set: Option<DistillationPointSet>,
    pub metrics: Metrics,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(
        config: RunConfig,
        model: &DetrModel,
        point_set: Option<DistillationPointSet>,
        metrics: Metrics,
    ) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, p)| (name, p.snapshot()))
            .collect();
        Checkpoint {
            config,
            model: model.cfg,
            point_set,
            metrics,
            tensors,
        }
    }

    /// Rebuilds the stored model: fresh init, then every parameter
    /// overwritten from the payload. Name or shape disagreements mean the
    /// file does not describe this model and are format errors.
    pub fn restore_model(&self) -> Result<DetrModel> {
        let model = DetrModel::init(self.model, 0)?;
        let params = model.named_params();
        if params.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint stores {} tensors, model has {} parameters",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, param) in params {
            let stored = self.tensors.get(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if stored.shape() != param.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?} is {:?} in the checkpoint but {:?} in the model",
                    stored.shape(),
                    param.shape()
                )));
            }
            param
                .borrow_mut()
                .values_mut()
                .copy_from_slice(stored.values());
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.value_bytes();
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                    len: bytes.len() as u64,
                },
            );
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            config: self.config.clone(),
            model: self.model,
            point_set: self.point_set.clone(),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("not a KDDT checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds the file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];

        // Entries must tile the payload exactly, in order and without gaps
        // or overlap.
        let mut cursor = 0u64;
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            if e.offset != cursor {
                return Err(Error::Format(format!(
                    "tensor {name:?} starts at {} but {} bytes precede it",
                    e.offset, cursor
                )));
            }
            let numel: usize = e.shape.iter().product();
            if numel as u64 * 8 != e.len {
                return Err(Error::Format(format!(
                    "tensor {name:?} shape {:?} disagrees with its {}-byte span",
                    e.shape, e.len
                )));
            }
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {name:?} runs past the payload")));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name.clone(), Tensor::new(e.shape.clone(), values)?);
            cursor = end as u64;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, tensor table accounts for {cursor}",
                payload.len()
            )));
        }

        Ok(Checkpoint {
            config: header.config,
            model: header.model,
            point_set: header.point_set,
            metrics: header.metrics,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
