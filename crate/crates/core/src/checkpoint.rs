//! Model checkpoints: a JSON header (`model.json`) holding the architecture
//! and a tensor index, plus `params.bin`, the raw little-endian `f32`
//! parameters in index order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xaimi_nn::Params;

use crate::error::{Error, Result};
use crate::io;

pub const FORMAT: &str = "xaimi-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header<S> {
    pub format: String,
    pub kind: String,
    pub spec: S,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Writes `params` with its architecture description; returns the blob digest.
pub fn save<S: Serialize, P: Params<f32> + ?Sized>(dir: &Path, kind: &str, spec: &S, params: &P) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(params.num_params() * 4);
    let mut offset = 0;
    params.visit_params(&mut |name, p| {
        tensors.push(TensorEntry { name: name.to_string(), offset, len: p.len() });
        offset += p.len();
        for v in p {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let digest = io::sha256_bytes(&blob);
    let blob_path = dir.join("params.bin");
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let header = Header {
        format: FORMAT.into(),
        kind: kind.into(),
        spec,
        dtype: "f32le".into(),
        tensors,
        blob_sha256: digest.clone(),
    };
    io::write_json(&dir.join("model.json"), &header)?;
    Ok(digest)
}

/// Reads a checkpoint of the given kind, verifying the blob digest.
pub fn load<S: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(Header<S>, Vec<f32>)> {
    let header: Header<S> = io::read_json(&dir.join("model.json"))?;
    if header.format != FORMAT || header.kind != kind {
        return Err(Error::Load {
            path: dir.into(),
            reason: format!("expected {FORMAT} `{kind}`, found {} `{}`", header.format, header.kind),
        });
    }
    let blob_path = dir.join("params.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if io::sha256_bytes(&blob) != header.blob_sha256 {
        return Err(Error::Load { path: blob_path, reason: "parameter checksum mismatch".into() });
    }
    let flat = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, flat))
}

/// Checks that `params` has exactly the tensor layout recorded in `entries`
/// and loads `flat` into it.
pub fn restore<P: Params<f32> + ?Sized>(params: &mut P, entries: &[TensorEntry], flat: &[f32]) -> Result<()> {
    let mut layout = Vec::new();
    let mut offset = 0;
    params.visit_params(&mut |name, p| {
        layout.push(TensorEntry { name: name.to_string(), offset, len: p.len() });
        offset += p.len();
    });
    if layout != entries {
        return Err(Error::Load {
            path: "params.bin".into(),
            reason: "tensor layout does not match architecture".into(),
        });
    }
    params.set_flat_params(flat)?;
    Ok(())
}

/// Digest of a checkpoint directory's parameter blob.
pub fn digest(dir: &Path) -> Result<String> {
    let header: Header<serde_json::Value> = io::read_json(&dir.join("model.json"))?;
    Ok(header.blob_sha256)
}
