//! Self-describing checkpoint files.
//!
//! A checkpoint is a safetensors file holding every weight and batch-norm
//! buffer in f32. The header metadata carries the classifier config, the
//! taxonomy it was trained against, training metadata and a sha256 of the
//! tensor contents that is verified on load.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use habitat_core::ClassTaxonomy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HabitatError, IoContext, Result};
use crate::model::{Classifier, ClassifierConfig};

pub const CHECKPOINT_FORMAT: &str = "habitat-checkpoint/1";

const KEY_FORMAT: &str = "format";
const KEY_META: &str = "meta";
const KEY_DIGEST: &str = "sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ClassifierConfig,
    pub taxonomy_version: String,
    pub class_abbreviations: Vec<String>,
    pub epoch: usize,
    pub val_accuracy: f64,
    #[serde(default)]
    pub fold: Option<usize>,
    /// Filled in when saving: backbone, taxonomy, epoch and content hash.
    #[serde(default)]
    pub model_version: String,
}

impl CheckpointMeta {
    pub fn new(model: &Classifier, taxonomy: &ClassTaxonomy, epoch: usize, val_accuracy: f64) -> Self {
        Self {
            config: model.config().clone(),
            taxonomy_version: taxonomy.version().to_string(),
            class_abbreviations: taxonomy.abbreviations().map(String::from).collect(),
            epoch,
            val_accuracy,
            fold: None,
            model_version: String::new(),
        }
    }

    /// Fails unless this checkpoint was trained on exactly `taxonomy`'s classes.
    pub fn check_compatible(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.config.n_classes != taxonomy.len() {
            return Err(HabitatError::Compatibility(format!(
                "checkpoint has {} classes, taxonomy `{}` has {}",
                self.config.n_classes,
                taxonomy.version(),
                taxonomy.len()
            )));
        }
        if self.taxonomy_version != taxonomy.version() {
            return Err(HabitatError::Compatibility(format!(
                "checkpoint taxonomy `{}` differs from `{}`",
                self.taxonomy_version,
                taxonomy.version()
            )));
        }
        if !self.class_abbreviations.iter().map(String::as_str).eq(taxonomy.abbreviations()) {
            return Err(HabitatError::Compatibility(
                "checkpoint class list differs from the taxonomy".into(),
            ));
        }
        Ok(())
    }
}

fn digest(tensors: &[(String, Tensor)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `model` with `meta`; returns the stored metadata, whose
/// `model_version` is derived from the content hash.
pub fn save_checkpoint(model: &Classifier, meta: &CheckpointMeta, path: &Path) -> Result<CheckpointMeta> {
    if meta.config != *model.config() {
        return Err(HabitatError::Compatibility(
            "metadata config differs from the model's".into(),
        ));
    }
    if meta.class_abbreviations.len() != meta.config.n_classes {
        return Err(HabitatError::Compatibility(format!(
            "{} class names for a {}-class model",
            meta.class_abbreviations.len(),
            meta.config.n_classes
        )));
    }
    let tensors: Vec<(String, Tensor)> = model
        .state()?
        .into_iter()
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<_>>()?;
    let sha = digest(&tensors)?;
    let mut meta = meta.clone();
    meta.model_version = format!(
        "{}/{}/epoch{}/{}",
        meta.config.backbone,
        meta.taxonomy_version,
        meta.epoch,
        &sha[..12]
    );
    let info = HashMap::from([
        (KEY_FORMAT.to_string(), CHECKPOINT_FORMAT.to_string()),
        (KEY_META.to_string(), serde_json::to_string(&meta)?),
        (KEY_DIGEST.to_string(), sha),
    ]);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(info))
        .map_err(|e| HabitatError::Integrity(e.to_string()))?;
    std::fs::write(path, bytes).at(path)?;
    Ok(meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| HabitatError::Integrity(format!("{}: {e}", path.display())))?;
    parse_meta(header.metadata().as_ref(), path).map(|(m, _)| m)
}

fn parse_meta(info: Option<&HashMap<String, String>>, path: &Path) -> Result<(CheckpointMeta, String)> {
    let bad = |m: &str| HabitatError::Integrity(format!("{}: {m}", path.display()));
    let info = info.ok_or_else(|| bad("no metadata"))?;
    if info.get(KEY_FORMAT).map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(bad("not a habitat checkpoint"));
    }
    let meta: CheckpointMeta = serde_json::from_str(info.get(KEY_META).ok_or_else(|| bad("missing meta"))?)
        .map_err(|e| bad(&e.to_string()))?;
    let sha = info.get(KEY_DIGEST).ok_or_else(|| bad("missing digest"))?.clone();
    Ok((meta, sha))
}

/// Loads a checkpoint, verifying its content hash, and when `taxonomy` is
/// given, that the class list matches it.
pub fn load_checkpoint(path: &Path, taxonomy: Option<&ClassTaxonomy>) -> Result<(Classifier, CheckpointMeta)> {
    let bytes = std::fs::read(path).at(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| HabitatError::Integrity(format!("{}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| HabitatError::Integrity(format!("{}: {e}", path.display())))?;
    let (meta, expected_sha) = parse_meta(header.metadata().as_ref(), path)?;
    if meta.class_abbreviations.len() != meta.config.n_classes {
        return Err(HabitatError::Integrity(
            "class list length differs from n_classes".into(),
        ));
    }
    if let Some(tax) = taxonomy {
        meta.check_compatible(tax)?;
    }
    let mut tensors: Vec<(String, Tensor)> = st
        .tensors()
        .into_iter()
        .map(|(name, view)| Ok((name, candle_core::safetensors::Load::load(&view, &Device::Cpu)?)))
        .collect::<Result<_>>()?;
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let sha = digest(&tensors)?;
    if sha != expected_sha {
        return Err(HabitatError::Integrity(format!(
            "{}: content hash mismatch",
            path.display()
        )));
    }
    let mut config = meta.config.clone();
    config.pretrained = false;
    let model = Classifier::initialised(&config)?;
    model.load_state(&tensors.into_iter().collect())?;
    Ok((model, meta))
}
