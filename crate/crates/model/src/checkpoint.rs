//! Checkpoint files.
//!
//! A checkpoint is a safetensors archive holding every parameter as a
//! little-endian `f32` tensor under its parameter name. The header metadata
//! has a single entry `pointq` whose value is a JSON object:
//!
//! | field     | value                      |
//! |-----------|----------------------------|
//! | `format`  | `"pointq-checkpoint"`      |
//! | `version` | `1`                        |
//! | `config`  | [`ModelConfig`]            |
//! | `meta`    | [`CheckpointMeta`]         |
//!
//! One entry keeps the header byte-stable, since safetensors writes its
//! metadata map in hash order.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, View};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ModelConfig};
use crate::error::ModelError;

pub const CHECKPOINT_FORMAT: &str = "pointq-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "pointq";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    /// Per-epoch mean training loss.
    #[serde(default)]
    pub loss_log: Vec<f64>,
}

struct Raw {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn checkpoint_bytes(model: &Detector, meta: &CheckpointMeta) -> Result<Vec<u8>, ModelError> {
    let mut raws = Vec::new();
    for (name, var) in model.params().vars() {
        let flat: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
        let bytes = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        raws.push((name.clone(), Raw { shape: var.dims().to_vec(), bytes }));
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        meta: meta.clone(),
    };
    let mut info = HashMap::new();
    info.insert(METADATA_KEY.to_string(), serde_json::to_string(&header).expect("header serializes"));
    safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(info))
        .map_err(|e| ModelError::Checkpoint { path: String::new(), message: e.to_string() })
}

pub fn save_checkpoint(model: &Detector, meta: &CheckpointMeta, path: &Path) -> Result<(), ModelError> {
    let bytes = checkpoint_bytes(model, meta).map_err(|e| match e {
        ModelError::Checkpoint { message, .. } => err(path, message),
        e => e,
    })?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, CheckpointMeta), ModelError> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(path, e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| err(path, "missing metadata"))?;
    let raw = info
        .get(METADATA_KEY)
        .ok_or_else(|| err(path, "not a pointq checkpoint"))?;
    let header: Header = serde_json::from_str(raw).map_err(|e| err(path, format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(err(path, "not a pointq checkpoint"));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(err(path, format!("unsupported version {}", header.version)));
    }
    let meta = header.meta;
    let model = Detector::new(header.config)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| err(path, e.to_string()))?;
    if st.len() != model.params().vars().len() {
        return Err(err(path, format!("{} tensors, model has {}", st.len(), model.params().vars().len())));
    }
    for (name, var) in model.params().vars() {
        let view = st.tensor(name).map_err(|_| err(path, format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != var.dims() {
            return Err(err(path, format!("tensor {name} has wrong dtype or shape {:?}", view.shape())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(data, view.shape(), model.device())?.to_dtype(DType::F32)?;
        var.set(&t)?;
    }
    Ok((model, meta))
}
