//! Binary tensor archive used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"IFTA"         4 bytes
//! version u32            4 bytes
//! manifest_len u64       8 bytes
//! manifest               manifest_len bytes of UTF-8 JSON
//! payload                concatenated raw little-endian tensor data
//! ```
//!
//! The manifest lists every tensor as `{name, shape, dtype, elem_size,
//! offset, nbytes}` with offsets relative to the start of the payload,
//! plus a free-form `metadata` object owned by the caller.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IFTA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub elem_size: usize,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named tensors plus metadata into archive bytes.
pub fn encode<T: Element>(
    tensors: &IndexMap<String, Tensor<T>>,
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            elem_size: T::SIZE,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        metadata,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses archive bytes, validating the header, manifest and payload bounds.
pub fn decode<T: Element>(
    bytes: &[u8],
) -> Result<(IndexMap<String, Tensor<T>>, serde_json::Value)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Integrity(
            "not a tensor archive (bad magic or short header)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported archive version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Integrity("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    let payload = &bytes[manifest_end..];

    let mut expected_len = 0u64;
    let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE || entry.elem_size != T::SIZE {
            return Err(Error::Integrity(format!(
                "tensor {} has dtype {} ({} bytes), expected {}",
                entry.name,
                entry.dtype,
                entry.elem_size,
                T::DTYPE
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.nbytes != (count * T::SIZE) as u64 {
            return Err(Error::Integrity(format!(
                "tensor {} byte count disagrees with its shape",
                entry.name
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > payload.len() {
            return Err(Error::Integrity(format!(
                "tensor {} is truncated ({} of {} payload bytes present)",
                entry.name,
                payload.len(),
                end
            )));
        }
        let data = payload[start..end]
            .chunks_exact(T::SIZE)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(&entry.shape, data)
            .map_err(|e| Error::Integrity(format!("tensor {}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate tensor name {}",
                entry.name
            )));
        }
        expected_len = expected_len.max(end as u64);
    }
    if expected_len != payload.len() as u64 {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes but the manifest accounts for {}",
            payload.len(),
            expected_len
        )));
    }
    Ok((tensors, manifest.metadata))
}

/// Writes an archive atomically: a sibling temp file is renamed into place.
pub fn save<T: Element>(
    path: &Path,
    tensors: &IndexMap<String, Tensor<T>>,
    metadata: serde_json::Value,
) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<(IndexMap<String, Tensor<T>>, serde_json::Value)> {
    decode(&fs::read(path)?)
}
