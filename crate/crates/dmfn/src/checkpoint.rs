//! Named-parameter manifest files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! bytes 0..8   magic "DMFNCKPT"
//! bytes 8..12  u32 header length L
//! bytes 12..12+L  JSON header (version, kind, meta, tensor table, payload SHA-256)
//! remainder    raw tensor payload, concatenated in table order
//! ```
//!
//! Each tensor table entry records `name`, `dtype` (`f32`/`f64`), `shape`,
//! and `offset`/`byte_len` into the payload. The header carries a SHA-256 of
//! the payload; loads verify it before returning. Writes are atomic
//! (temp file + rename). The same format stores generator/discriminator
//! checkpoints, optimizer moments and the frozen VGG19 weights.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DMFNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    /// What the file holds, e.g. "train_state" or "vgg19_features".
    pub kind: String,
    /// Free-form metadata (iteration, config hash, rng seed, ...).
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write tensors to `path` atomically.
pub fn write_manifest<F: Scalar>(
    path: &Path,
    kind: &str,
    meta: Value,
    tensors: &[(String, ArrayD<F>)],
) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, arr) in tensors {
        let offset = payload.len() as u64;
        if F::DTYPE == "f32" {
            for &v in arr.iter() {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        } else {
            for &v in arr.iter() {
                payload.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: F::DTYPE.to_string(),
            shape: arr.shape().to_vec(),
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let header = ManifestHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a manifest, verifying the payload checksum, converting tensors to `F`.
pub fn read_manifest<F: Scalar>(path: &Path) -> Result<(ManifestHeader, IndexMap<String, ArrayD<F>>)> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open '{}': {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in '{}'",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: ManifestHeader = serde_json::from_slice(&header_json)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let digest = hex(&Sha256::digest(&payload));
    if digest != header.payload_sha256 {
        return Err(Error::Checkpoint(format!(
            "payload checksum mismatch in '{}' (corrupt file?)",
            path.display()
        )));
    }
    let mut tensors = IndexMap::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' out of bounds", entry.name)))?;
        let data: Vec<F> = match entry.dtype.as_str() {
            "f32" => bytes
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            "f64" => bytes
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has unsupported dtype '{other}'",
                    entry.name
                )))
            }
        };
        let expected: usize = entry.shape.iter().product();
        if data.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' length {} does not match shape {:?}",
                entry.name,
                data.len(),
                entry.shape
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), arr);
    }
    Ok((header, tensors))
}

/// SHA-256 over the raw little-endian payload of the given tensors; used to
/// verify frozen weights stay frozen.
pub fn tensors_checksum<F: Scalar>(tensors: &[(String, ArrayD<F>)]) -> String {
    let mut h = Sha256::new();
    for (name, arr) in tensors {
        h.update(name.as_bytes());
        for &v in arr.iter() {
            h.update(v.to_f64().to_le_bytes());
        }
    }
    hex(&h.finalize())
}
