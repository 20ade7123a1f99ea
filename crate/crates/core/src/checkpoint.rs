//! Checkpoint format: a flat little-endian `f64` file holding every
//! parameter in declared order, plus a JSON manifest at `<file>.json` with
//! the model config, its digest and each parameter's name and shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};

pub const FORMAT: &str = "ropelab-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub config_digest: String,
    pub params: Vec<ParamEntry>,
    pub value_count: usize,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn manifest_for(model: &Model) -> Manifest {
    let params: Vec<ParamEntry> = model
        .params()
        .named()
        .into_iter()
        .map(|(name, t)| ParamEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    Manifest {
        format: FORMAT.to_string(),
        config: model.config().clone(),
        config_digest: model.config().digest(),
        value_count: model.params().numel(),
        params,
    }
}

/// Serialises all parameter values in declared order.
pub fn encode_values(model: &Model) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(model.params().numel() * 8);
    for (_, t) in model.params().named() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_values(model)).map_err(|e| Error::io(path, e))?;
    let json = serde_json::to_string_pretty(&manifest_for(model))
        .map_err(|e| Error::Format(e.to_string()))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&manifest, &bytes)
}

pub fn decode(manifest: &Manifest, bytes: &[u8]) -> Result<Model> {
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {}",
            manifest.format
        )));
    }
    if manifest.config.digest() != manifest.config_digest {
        return Err(Error::Format("config digest mismatch".into()));
    }
    if bytes.len() != manifest.value_count * 8 {
        return Err(Error::Format(format!(
            "expected {} values, file holds {} bytes",
            manifest.value_count,
            bytes.len()
        )));
    }
    let mut params = ModelParams::zeros(&manifest.config);
    let layout: Vec<ParamEntry> = params
        .named()
        .into_iter()
        .map(|(name, t)| ParamEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    if layout != manifest.params {
        return Err(Error::Format(
            "parameter layout does not match config".into(),
        ));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v = values.next().expect("length checked above");
        }
    });
    Model::from_params(manifest.config.clone(), params)
}
