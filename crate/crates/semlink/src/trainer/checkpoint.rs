//! Checkpoints: a directory with `manifest.json` mapping parameter names to
//! shape/dtype/file, plus one little-endian raw f64 file per parameter.
//! Reloading reproduces forward outputs bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{blob_from_bytes, blob_to_bytes};
use crate::numcore::{Dtype, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    pub params: BTreeMap<String, ParamEntry>,
}

impl CheckpointManifest {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::manifest("<json>", e.to_string()))
    }
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    config_hash: &str,
    stage: &str,
    epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut params = BTreeMap::new();
    for (i, (name, t)) in store.iter().enumerate() {
        let file = format!("param_{i:05}.f64");
        let path = dir.join(&file);
        fs::write(&path, blob_to_bytes(&t.data))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        params.insert(
            name.clone(),
            ParamEntry {
                shape: t.shape.clone(),
                dtype: t.dtype,
                file,
            },
        );
    }
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        stage: stage.to_string(),
        epoch,
        params,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest = CheckpointManifest::from_json_bytes(&bytes)?;
    let mut store = ParamStore::new();
    for (name, entry) in &manifest.params {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let data = blob_from_bytes(&bytes)?;
        let want = entry.shape.iter().product::<usize>() * entry.dtype.width();
        if data.len() != want {
            return Err(Error::manifest(
                format!("params.{name}"),
                format!("{} values on disk, shape implies {want}", data.len()),
            ));
        }
        store.insert(
            name.clone(),
            Tensor {
                shape: entry.shape.clone(),
                dtype: entry.dtype,
                data,
            },
        );
    }
    Ok((store, manifest))
}
