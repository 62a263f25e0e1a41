//! `.sdpm` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SDPM" | u32 version | u32 manifest_len | manifest (UTF-8 JSON) | f32 blobs
//! ```
//!
//! Blobs follow the manifest's parameter order, each `product(shape)` floats.

use crate::{AdamWConfig, NnError, ParamStore, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub optimizer: AdamWConfig,
    pub step: u64,
    /// Caller-defined metadata (model kind, config echo, normalizer, ...).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
}

pub fn encode_checkpoint(
    params: &ParamStore<f32>,
    optimizer: AdamWConfig,
    step: u64,
    meta: serde_json::Value,
) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        params: params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
        optimizer,
        step,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| NnError::Format(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fmt("missing SDPM magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + mlen).ok_or_else(|| fmt("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(body)?;
    let mut offset = 12 + mlen;
    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| NnError::Format(format!("truncated blob for `{}`", entry.name)))?;
        let value = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.add(entry.name.clone(), &entry.shape, value);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(fmt("trailing bytes after parameter blobs"));
    }
    Ok(Checkpoint { manifest, params })
}

pub fn write_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    optimizer: AdamWConfig,
    step: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(params, optimizer, step, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_order() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]);
        s.add("a.b", &[3], vec![0.1, 0.2, 0.3]);
        let meta = serde_json::json!({"model_kind": "value"});
        let bytes = encode_checkpoint(&s, AdamWConfig::default(), 42, meta.clone()).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.manifest.step, 42);
        assert_eq!(ck.manifest.meta, meta);
        assert_eq!(ck.params.len(), 2);
        for (a, b) in s.iter().zip(ck.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[4], vec![1.0; 4]);
        let bytes = encode_checkpoint(&s, AdamWConfig::default(), 0, serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_checkpoint(b"NOPE").is_err());
    }
}
