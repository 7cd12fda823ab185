//! The `TCE1` container: magic, little-endian `u32` metadata length, UTF-8
//! JSON metadata (including the array directory), raw little-endian `f32`
//! payloads, and a trailing FNV-1a 64 checksum of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TceError};
use crate::rng::fnv1a64;

pub const MAGIC: &[u8; 3] = b"TCE";
pub const VERSION: u8 = b'1';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in floats.
    offset: usize,
}

/// A named array as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Serialises `meta` (which must be a JSON object) and `arrays`.
pub fn encode(meta: &Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let Value::Object(map) = meta else {
        return Err(TceError::arg("container metadata must be a JSON object"));
    };
    let mut map = map.clone();
    let mut offset = 0;
    let mut directory = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(TceError::arg(format!(
                "array {} has {} values but shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        directory.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
        });
        offset += a.data.len();
    }
    map.insert("arrays".into(), serde_json::to_value(directory).expect("plain data"));
    let header = serde_json::to_vec(&Value::Object(map)).expect("plain data");
    let header_len = u32::try_from(header.len()).map_err(|_| TceError::arg("container metadata too large"))?;

    let mut out = Vec::with_capacity(4 + 4 + header.len() + 4 * offset + 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        for &v in &a.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Verifies and splits a container into metadata (without the array
/// directory) and arrays.
pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<NamedArray>)> {
    if bytes.len() < 4 || &bytes[..3] != MAGIC {
        return Err(TceError::Checkpoint("not a TCE checkpoint (bad magic)".into()));
    }
    if bytes[3] != VERSION {
        return Err(TceError::Version(bytes[3]));
    }
    if bytes.len() < 4 + 4 + 8 {
        return Err(TceError::Checkpoint(format!("truncated file ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(TceError::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let header = body
        .get(8..8 + header_len)
        .ok_or_else(|| TceError::Checkpoint("metadata runs past the end of the file".into()))?;
    let mut meta: Value =
        serde_json::from_slice(header).map_err(|e| TceError::Checkpoint(format!("bad metadata: {e}")))?;
    let directory: Vec<ArrayEntry> = meta
        .as_object_mut()
        .and_then(|m| m.remove("arrays"))
        .ok_or_else(|| TceError::Checkpoint("metadata lacks an array directory".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| TceError::Checkpoint(format!("bad array directory: {e}"))))?;
    let payload = &body[8 + header_len..];
    if payload.len() % 4 != 0 {
        return Err(TceError::Checkpoint("payload is not a whole number of f32 values".into()));
    }
    let floats = payload.len() / 4;
    let mut arrays = Vec::with_capacity(directory.len());
    for entry in directory {
        let n: usize = entry.shape.iter().product();
        if entry.offset + n > floats {
            return Err(TceError::Checkpoint(format!("array {} runs past the payload", entry.name)));
        }
        let data = payload[4 * entry.offset..4 * (entry.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        arrays.push(NamedArray {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    Ok((meta, arrays))
}

pub fn write(path: &Path, meta: &Value, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(meta, arrays)?;
    std::fs::write(path, bytes).map_err(|e| TceError::io(path, e))
}

pub fn read(path: &Path) -> Result<(Value, Vec<NamedArray>)> {
    let bytes = std::fs::read(path).map_err(|e| TceError::io(path, e))?;
    decode(&bytes)
}
