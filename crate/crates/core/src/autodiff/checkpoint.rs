//! `.mckpt` container: magic, little-endian `u32` manifest length, a JSON
//! manifest, then the concatenated little-endian `f32` tensor blobs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NamedTensors, Tensor};
use crate::error::{Error, Result};

pub const MCKPT_MAGIC: &[u8; 8] = b"MCKPT001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, TensorEntry>,
    meta: serde_json::Value,
}

/// Serializes `tensors` and an arbitrary JSON `meta` block.
pub fn encode(tensors: &NamedTensors<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.insert(name.clone(), TensorEntry { shape: t.shape.clone(), offset });
        offset += 4 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries, meta })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
    out.extend_from_slice(MCKPT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(NamedTensors<f32>, serde_json::Value)> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file shorter than checkpoint header"));
    }
    if &bytes[..8] != MCKPT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blob_start = 12 + mlen;
    if bytes.len() < blob_start {
        return Err(Error::format(12, format!("manifest length {mlen} exceeds file")));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| Error::format(12, format!("manifest: {e}")))?;
    let blob = &bytes[blob_start..];
    let mut tensors = NamedTensors::new();
    let mut expected = 0u64;
    for (name, e) in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(Error::format(
                (blob_start + blob.len()) as u64,
                format!("tensor {name} needs bytes up to {}", blob_start + end),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for (i, c) in blob[start..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format((blob_start + start + 4 * i) as u64, format!("non-finite value in {name}")));
            }
            data.push(v);
        }
        expected = expected.max(end as u64);
        tensors.insert(name.clone(), Tensor { shape: e.shape.clone(), data });
    }
    if expected != blob.len() as u64 {
        return Err(Error::format(
            (blob_start as u64) + expected,
            format!("{} trailing bytes after last tensor", blob.len() as u64 - expected),
        ));
    }
    Ok((tensors, manifest.meta))
}

pub fn save(path: impl AsRef<Path>, tensors: &NamedTensors<f32>, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors, meta)?).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(NamedTensors<f32>, serde_json::Value)> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
}
