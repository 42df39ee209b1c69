//! Flat tensor checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every tensor's `f64` values back to back in little-endian order.
//!
//! ```text
//! { "dtype": "f64", "meta": {...}, "tensors": [{"name", "shape", "offset"}] }
//! ```
//! `offset` counts elements (not bytes) from the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save<'a>(
    path: &Path,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.to_owned(), shape: t.shape().to_vec(), offset });
        offset += t.len();
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { dtype: "f64".into(), meta, tensors: entries })
        .expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + data.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct Loaded {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| {
        Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_owned()))
    };
    if bytes.len() < 8 {
        return Err(corrupt("checkpoint is truncated"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(corrupt("checkpoint header is truncated"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|_| corrupt("checkpoint header is not valid JSON"))?;
    if header.dtype != "f64" {
        return Err(corrupt("unsupported checkpoint dtype"));
    }
    let body = &bytes[8 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * 8, (e.offset + n) * 8);
        if end > body.len() {
            return Err(corrupt("checkpoint data section is truncated"));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Loaded { meta: header.meta, tensors })
}
