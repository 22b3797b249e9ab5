//! Binary dataset exchange: little-endian f64 blobs (complex values
//! interleaved re/im, row-major) with a sidecar JSON manifest carrying the
//! dimensions, seed, and full configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::semnet::SourceSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub dims: BTreeMap<String, usize>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::manifest("<json>", e.to_string()))?;
        m.config
            .validate()
            .map_err(|e| Error::manifest("config", e.to_string()))?;
        Ok(m)
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::manifest(format!("dims.{name}"), "missing dimension"))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Decode a little-endian f64 blob; rejects ragged lengths and non-finite
/// values.
pub fn blob_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::manifest(
            "blob",
            format!("length {} is not a multiple of 8", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / 8);
    for chunk in bytes.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::manifest("blob", "non-finite value in data blob"));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn blob_to_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Channel sets ─────────────────────────────────────────────────────

pub fn export_channels(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    sets: &[ChannelSet],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let first = sets
        .first()
        .ok_or_else(|| Error::manifest("samples", "no channel sets to export"))?;
    let mut dims = BTreeMap::new();
    dims.insert("samples".into(), sets.len());
    dims.insert("users".into(), first.users);
    dims.insert("symbols".into(), first.symbols);
    dims.insert("subcarriers".into(), first.subcarriers);
    dims.insert("n_rx".into(), first.n_rx);
    dims.insert("n_tx".into(), first.n_tx);
    let manifest = Manifest {
        kind: "channel_set".into(),
        dims,
        seed,
        config: cfg.clone(),
    };
    let mut blob = Vec::new();
    for s in sets {
        blob.extend_from_slice(&s.data);
    }
    write_file(&dir.join("channels.bin"), &blob_to_bytes(&blob))?;
    write_file(&dir.join("channels.json"), manifest.to_json_pretty().as_bytes())
}

pub fn load_channels(dir: &Path) -> Result<(Manifest, Vec<ChannelSet>)> {
    let manifest = Manifest::from_json_bytes(&read_file(&dir.join("channels.json"))?)?;
    if manifest.kind != "channel_set" {
        return Err(Error::manifest("kind", format!("expected channel_set, got {}", manifest.kind)));
    }
    let blob = blob_from_bytes(&read_file(&dir.join("channels.bin"))?)?;
    let samples = manifest.dim("samples")?;
    let users = manifest.dim("users")?;
    let symbols = manifest.dim("symbols")?;
    let subcarriers = manifest.dim("subcarriers")?;
    let n_rx = manifest.dim("n_rx")?;
    let n_tx = manifest.dim("n_tx")?;
    let per = 2 * users * symbols * subcarriers * n_rx * n_tx;
    if blob.len() != samples * per {
        return Err(Error::manifest(
            "dims.samples",
            format!("blob holds {} values, manifest implies {}", blob.len(), samples * per),
        ));
    }
    let noise_var = manifest.config.noise_var();
    let sets = blob
        .chunks_exact(per)
        .map(|chunk| ChannelSet {
            users,
            symbols,
            subcarriers,
            n_rx,
            n_tx,
            noise_var,
            data: chunk.to_vec(),
        })
        .collect();
    Ok((manifest, sets))
}

// ── Synthetic datasets ───────────────────────────────────────────────

pub fn export_dataset(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    samples: &[SourceSample],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    if samples.is_empty() {
        return Err(Error::manifest("samples", "no samples to export"));
    }
    let (h, w) = (cfg.task.img_h, cfg.task.img_w);
    let mut dims = BTreeMap::new();
    dims.insert("samples".into(), samples.len());
    dims.insert("img_h".into(), h);
    dims.insert("img_w".into(), w);
    dims.insert("classes".into(), cfg.task.classes);
    let manifest = Manifest {
        kind: "dataset".into(),
        dims,
        seed,
        config: cfg.clone(),
    };
    let mut blob = Vec::with_capacity(samples.len() * 5 * h * w);
    for s in samples {
        blob.extend_from_slice(&s.mod_a.data);
        blob.extend_from_slice(&s.mod_b.data);
        blob.extend(s.label.iter().map(|&c| c as f64));
    }
    write_file(&dir.join("dataset.bin"), &blob_to_bytes(&blob))?;
    write_file(&dir.join("dataset.json"), manifest.to_json_pretty().as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<SourceSample>)> {
    let manifest = Manifest::from_json_bytes(&read_file(&dir.join("dataset.json"))?)?;
    if manifest.kind != "dataset" {
        return Err(Error::manifest("kind", format!("expected dataset, got {}", manifest.kind)));
    }
    let blob = blob_from_bytes(&read_file(&dir.join("dataset.bin"))?)?;
    let samples = manifest.dim("samples")?;
    let h = manifest.dim("img_h")?;
    let w = manifest.dim("img_w")?;
    let classes = manifest.dim("classes")?;
    let per = 5 * h * w;
    if blob.len() != samples * per {
        return Err(Error::manifest(
            "dims.samples",
            format!("blob holds {} values, manifest implies {}", blob.len(), samples * per),
        ));
    }
    let mut out = Vec::with_capacity(samples);
    for chunk in blob.chunks_exact(per) {
        let mod_a = Tensor::from_real(&[3, h, w], chunk[..3 * h * w].to_vec());
        let mod_b = Tensor::from_real(&[1, h, w], chunk[3 * h * w..4 * h * w].to_vec());
        let mut label = Vec::with_capacity(h * w);
        for &v in &chunk[4 * h * w..] {
            if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
                return Err(Error::manifest(
                    "label",
                    format!("label value {v} invalid for {classes} classes"),
                ));
            }
            label.push(v as usize);
        }
        out.push(SourceSample { mod_a, mod_b, label });
    }
    Ok((manifest, out))
}
