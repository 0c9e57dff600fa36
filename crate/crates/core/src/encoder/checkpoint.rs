//! Named-tensor container: `DOTCKPT\0`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then raw little-endian tensor data in
//! store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DotError, Result};
use crate::tensor::{ParamStore, Precision, Scalar};

const MAGIC: &[u8; 8] = b"DOTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: Precision,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn err(msg: impl Into<String>) -> DotError {
    DotError::Checkpoint(msg.into())
}

/// Serializes every tensor of `store` plus a free-form `config` document.
pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        let len = (p.numel() * T::BYTES) as u64;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            decay: p.decay,
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        dtype: T::PRECISION,
        config: config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_typed<S: Scalar>(header: &Header, data: &[u8]) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let (start, end) = (t.offset as usize, (t.offset + t.len) as usize);
        let numel: usize = t.shape.iter().product();
        if end > data.len() || t.len as usize != numel * S::BYTES {
            return Err(err(format!("tensor `{}` has an inconsistent extent", t.name)));
        }
        let values = data[start..end].chunks_exact(S::BYTES).map(S::read_le).collect();
        store.insert(t.name.clone(), t.shape.clone(), values, t.decay)?;
    }
    Ok(store)
}

/// Parses a container, converting tensors to `T` if they were stored in the
/// other precision.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(err("header and preamble disagree on the format version"));
    }
    let data = &body[hlen..];
    let store = match header.dtype {
        Precision::F32 => read_typed::<f32>(&header, data)?.cast::<T>(),
        Precision::F64 => read_typed::<f64>(&header, data)?.cast::<T>(),
    };
    Ok((store, header.config))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, config: &serde_json::Value) -> Result<()> {
    std::fs::write(path, to_bytes(store, config)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    from_bytes(&std::fs::read(path)?)
}
