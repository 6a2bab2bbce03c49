//! Checkpoints are a single safetensors file: every parameter and buffer by
//! dotted name, with the model config and training metadata stored as JSON in
//! the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HybridSegmentor, ModelConfig};
use crate::params::ParamStore;

const FORMAT_KEY: &str = "format";
const FORMAT: &str = "crackseg-checkpoint-v1";
const CONFIG_KEY: &str = "model_config";
const META_KEY: &str = "training";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_val_loss: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: Option<String>,
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save(model: &HybridSegmentor, meta: &TrainingMeta, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tensors: Vec<(String, Tensor)> = model
        .store()
        .named()
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().clone()))
        .collect();
    let mut header = HashMap::new();
    header.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    header.insert(CONFIG_KEY.to_string(), serde_json::to_string(model.config())?);
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    safetensors::serialize_to_file(tensors, Some(header), path).map_err(st_err)?;
    Ok(())
}

/// Rebuilds the model described in the checkpoint header and restores every
/// stored tensor into it.
pub fn load(path: &Path, device: &Device) -> Result<(HybridSegmentor, TrainingMeta)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(st_err)?;
    let header = metadata
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    if header.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a {FORMAT} file", path.display())));
    }
    let field = |key: &str| {
        header
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))
    };
    let mut cfg: ModelConfig = serde_json::from_str(field(CONFIG_KEY)?)?;
    let meta: TrainingMeta = serde_json::from_str(field(META_KEY)?)?;
    // weights come from the checkpoint itself
    cfg.cnn.pretrained_weights = None;

    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let dtype = st
        .tensors()
        .first()
        .map(|(_, v)| v.load(device).map(|t| t.dtype()))
        .transpose()?
        .unwrap_or(DType::F32);
    let model = HybridSegmentor::new(&cfg, dtype, device, 0)?;
    let store = model.store();
    let mut restored = 0;
    for (name, view) in st.tensors() {
        store.assign(&name, &view.load(device)?)?;
        restored += 1;
    }
    if restored != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {restored} tensors, model expects {}",
            store.len()
        )));
    }
    Ok((model, meta))
}

/// Copies torchvision-named backbone tensors from a safetensors file into
/// `prefix.*` entries. Classifier weights and batch counters are ignored.
pub fn load_backbone_weights(store: &ParamStore, path: &Path, prefix: &str) -> Result<usize> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let mut loaded = 0;
    for (name, view) in st.tensors() {
        if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
            continue;
        }
        let target = format!("{prefix}.{name}");
        if store.get(&target).is_none() {
            return Err(Error::Checkpoint(format!(
                "backbone tensor `{name}` has no counterpart in the CNN path"
            )));
        }
        store.assign(&target, &view.load(store.device())?)?;
        loaded += 1;
    }
    let expected = store
        .named()
        .iter()
        .filter(|(k, _)| k.starts_with(&format!("{prefix}.")))
        .count();
    if loaded != expected {
        return Err(Error::Checkpoint(format!(
            "backbone file provided {loaded} of {expected} CNN tensors"
        )));
    }
    Ok(loaded)
}
