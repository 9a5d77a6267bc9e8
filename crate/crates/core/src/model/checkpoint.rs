//! Single-file checkpoint container: safetensors payload of named parameters
//! plus metadata carrying the format version, model configuration and a
//! free-form version tag.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};

use super::config::ModelConfig;
use super::params::ParamGroup;
use super::Ifsenet;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ifsenet-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub config: ModelConfig,
    pub version: String,
}

pub fn save(model: &Ifsenet, path: impl AsRef<Path>) -> Result<()> {
    save_with_version(model, path, model.version())
}

/// Saves with an explicit version tag instead of the model's own.
pub fn save_with_version(model: &Ifsenet, path: impl AsRef<Path>, version: &str) -> Result<()> {
    let path = path.as_ref();
    let tensors = model
        .params()
        .iter()
        .map(|(name, var)| Ok((name.clone(), var.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert(
        "format_version".to_string(),
        CHECKPOINT_FORMAT_VERSION.to_string(),
    );
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config())?,
    );
    meta.insert("version".to_string(), version.to_string());
    let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| ckpt_err(path, e))?;
    // Write-then-rename so a crash never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_info(path: &Path, bytes: &[u8]) -> Result<CheckpointInfo> {
    let (_, metadata) =
        safetensors::SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = metadata
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ckpt_err(path, "not an ifsenet checkpoint"));
    }
    let found = meta
        .get("format_version")
        .cloned()
        .unwrap_or_else(|| "<missing>".into());
    if found != CHECKPOINT_FORMAT_VERSION.to_string() {
        return Err(Error::CheckpointVersion {
            found,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("model_config")
            .ok_or_else(|| ckpt_err(path, "missing model_config"))?,
    )?;
    Ok(CheckpointInfo {
        config,
        version: meta.get("version").cloned().unwrap_or_default(),
    })
}

/// Reads only the metadata.
pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    read_info(path, &bytes)
}

/// Loads onto the CPU in single precision.
pub fn load_cpu(path: impl AsRef<Path>) -> Result<Ifsenet> {
    load(path, &Device::Cpu, DType::F32)
}

pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Ifsenet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let info = read_info(path, &bytes)?;
    let mut model = Ifsenet::with_options(info.config, 0, device.clone(), dtype)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    for name in model.params().iter().map(|(n, _)| n) {
        if !tensors.contains_key(name) {
            return Err(ckpt_err(path, format!("missing parameter {name}")));
        }
    }
    for (name, tensor) in &tensors {
        if model.params().get(name).is_none() {
            return Err(ckpt_err(path, format!("unexpected parameter {name}")));
        }
        model.params().assign(name, tensor)?;
    }
    model.set_version(info.version);
    Ok(model)
}

/// Copies pretrained backbone weights (torchvision naming, with or without the
/// `backbone.` prefix) into the model. Tensors the trunk does not use (layer4,
/// classifier) are ignored; every backbone parameter must be supplied.
pub fn import_backbone(model: &Ifsenet, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let tensors = candle_core::safetensors::load(path, model.params().device())?;
    let mut assigned = std::collections::BTreeSet::new();
    for (name, tensor) in &tensors {
        let full = if name.starts_with("backbone.") {
            name.clone()
        } else {
            format!("backbone.{name}")
        };
        if model.params().get(&full).is_some() {
            model.params().assign(&full, tensor)?;
            assigned.insert(full);
        }
    }
    let missing: Vec<&str> = model
        .params()
        .group(ParamGroup::Backbone)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !assigned.contains(*n))
        .collect();
    if !missing.is_empty() {
        return Err(ckpt_err(
            path,
            format!("{} backbone parameters missing, e.g. {}", missing.len(), missing[0]),
        ));
    }
    Ok(assigned.len())
}
