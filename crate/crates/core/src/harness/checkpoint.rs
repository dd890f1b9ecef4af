//! Tunable-only checkpoints: a safetensors archive whose header carries the
//! configuration, its fingerprint, the step count and a format version.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::Config;
use crate::error::{Result, VcpError};
use crate::model::VcpModel;

pub const FORMAT_NAME: &str = "vcp-tunable";
pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub step: usize,
    pub config: Config,
    /// Encoder weights used during training, if known.
    pub backbone: Option<String>,
}

/// Writes every tunable tensor as 32-bit floats.
pub fn save_checkpoint(path: &Path, model: &VcpModel, config: &Config, step: usize, backbone: Option<&str>) -> Result<()> {
    if config.model != model.config {
        return Err(VcpError::Checkpoint("configuration does not describe this model".into()));
    }
    let mut buffers = Vec::new();
    for (name, var) in model.store.vars() {
        let t = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
        let bytes: Vec<u8> = t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name, var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_NAME.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("fingerprint".to_string(), model.config.fingerprint());
    meta.insert("step".to_string(), step.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    if let Some(b) = backbone {
        meta.insert("backbone".to_string(), b.to_string());
    }
    safetensors::serialize_to_file(views, Some(meta), path)?;
    Ok(())
}

/// Reads the header and every tensor of a checkpoint.
pub fn read_checkpoint(path: &Path, device: &Device) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| VcpError::Checkpoint("checkpoint has no header metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| VcpError::Checkpoint(format!("checkpoint header lacks `{k}`")))
    };
    if field("format")? != FORMAT_NAME {
        return Err(VcpError::Checkpoint("not a tunable-parameter checkpoint".into()));
    }
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(VcpError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config: Config = serde_json::from_str(&field("config")?)?;
    let step = field("step")?
        .parse()
        .map_err(|_| VcpError::Checkpoint("malformed step count".into()))?;
    let meta = CheckpointMeta {
        fingerprint: field("fingerprint")?,
        step,
        config,
        backbone: meta.get("backbone").cloned(),
    };
    let st = SafeTensors::deserialize(&bytes)?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(VcpError::Checkpoint(format!("tensor `{name}` is not 32-bit float")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), device)?);
    }
    Ok((meta, tensors))
}

/// Copies checkpoint tensors into `model`, requiring an exact name match.
pub fn load_into(model: &VcpModel, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let names = model.store.names();
    for name in names {
        let t = tensors
            .get(name)
            .ok_or_else(|| VcpError::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        model.store.assign(name, t)?;
    }
    if tensors.len() != names.len() {
        let extra: Vec<_> = tensors.keys().filter(|k| !names.contains(k)).cloned().collect();
        return Err(VcpError::Checkpoint(format!("checkpoint holds unknown parameters {extra:?}")));
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
///
/// When `expected` is given its fingerprint must match the checkpoint's.
pub fn load_model(
    path: &Path,
    expected: Option<&Config>,
    dtype: DType,
    device: &Device,
) -> Result<(CheckpointMeta, VcpModel)> {
    let (meta, tensors) = read_checkpoint(path, device)?;
    if meta.fingerprint != meta.config.model.fingerprint() {
        return Err(VcpError::Checkpoint("stored fingerprint does not match stored configuration".into()));
    }
    if let Some(cfg) = expected {
        if cfg.model.fingerprint() != meta.fingerprint {
            return Err(VcpError::Checkpoint(
                "checkpoint was trained with a different model configuration".into(),
            ));
        }
    }
    let model = VcpModel::new(&meta.config.model, meta.config.train.seed, dtype, device)?;
    load_into(&model, &tensors)?;
    Ok((meta, model))
}
