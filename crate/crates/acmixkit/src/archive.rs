//! Binary tensor archive: an 8-byte little-endian header length, a UTF-8
//! JSON header mapping tensor name to shape/dtype/byte offset (plus an
//! optional `meta` object), then the raw little-endian f32 payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub fn write_archive(
    path: &Path,
    entries: &[(String, Vec<usize>, &[f32])],
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, shape, data) in entries {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Archive(format!(
                "tensor {name}: shape {shape:?} does not cover {} values",
                data.len()
            )));
        }
        if tensors
            .insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                },
            )
            .is_some()
        {
            return Err(Error::Archive(format!("duplicate tensor name {name}")));
        }
        offset += (data.len() * 4) as u64;
    }
    let header = serde_json::to_vec(&Header { tensors, meta })?;
    let mut f = File::create(path)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, _, data) in entries {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

pub struct Archive {
    pub header: Header,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut f = File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Archive("truncated archive: missing header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Archive("truncated archive: incomplete header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Archive(format!("malformed header: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut tensors = BTreeMap::new();
    for (name, entry) in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Archive(format!(
                "tensor {name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::Archive(format!(
                "tensor {name}: truncated payload ({} bytes, need {end})",
                payload.len()
            )));
        }
        let values: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name.clone(), values);
    }
    Ok(Archive { header, tensors })
}
