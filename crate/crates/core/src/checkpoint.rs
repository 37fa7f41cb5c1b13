//! Checkpoint directories: `manifest.json` (name → shape/dtype/offset),
//! `tensors.bin` (little-endian `f64` blob) and an optional `config.json`
//! sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const FORMAT: &str = "pointdet-ckpt-v1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";
const SIDECAR: &str = "config.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet,
    sidecar: Option<&serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: BLOB.into(),
        tensors,
    };
    let path = dir.join(BLOB);
    fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    if let Some(cfg) = sidecar {
        let path = dir.join(SIDECAR);
        let text = serde_json::to_string_pretty(cfg)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamSet> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bad = |detail: String| Error::Format {
        path: path.clone(),
        detail,
    };
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", manifest.format)));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| bad(format!("tensor `{}` runs past the blob", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(params)
}

pub fn load_sidecar(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(SIDECAR);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
