// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints of detector parameters.
//!
//! Layout, little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `"CGZC"` |
//! | 2 | u16 version = 1 |
//! | 4 | u32 length `n` of the JSON block |
//! | n | UTF-8 JSON `{"detector": <config>, "metadata": <any>}` |
//! | 4 | u32 tensor count |
//! | … | per tensor: u32 name length, name, u32 rows, u32 cols, rows·cols f64 |
//!
//! Tensors are written in [`DetectorParams::named`] order, so the same
//! parameters always produce the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorError, DetectorParams};
use crate::engine::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CGZC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    detector: DetectorConfig,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Detector parameters plus free-form metadata (e.g. the training configuration).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub metadata: serde_json::Value,
}

fn bad(path: &str, detail: impl Into<String>) -> DetectorError {
    DetectorError::Checkpoint {
        path: path.to_string(),
        detail: detail.into(),
    }
}

pub fn encode(params: &DetectorParams, metadata: &serde_json::Value) -> Result<Vec<u8>, DetectorError> {
    let header = Header {
        detector: params.config.clone(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad("<memory>", e.to_string()))?;
    let named = params.named();
    let mut out = Vec::with_capacity(14 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DetectorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DetectorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint, DetectorError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a detector checkpoint (bad magic)"));
    }
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| bad(path, format!("config block: {e}")))?;
    header.detector.validate().map_err(|e| bad(path, e))?;
    let mut params = DetectorParams::init(&header.detector);
    let expected = params.named().len();
    let count = r.u32()?;
    if count != expected {
        return Err(bad(path, format!("expected {expected} tensors, found {count}")));
    }
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad(path, "tensor name is not UTF-8"))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let slot = params
            .get_mut(&name)
            .ok_or_else(|| bad(path, format!("unexpected tensor {name:?}")))?;
        if slot.shape() != [rows, cols] {
            return Err(bad(
                path,
                format!("tensor {name:?} is {rows}x{cols}, expected {:?}", slot.shape()),
            ));
        }
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *slot = Tensor::new(rows, cols, data);
    }
    if r.pos != bytes.len() {
        return Err(bad(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, params: &DetectorParams, metadata: &serde_json::Value) -> Result<(), DetectorError> {
    let bytes = encode(params, metadata)?;
    fs::write(path, bytes).map_err(|source| DetectorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, DetectorError> {
    let bytes = fs::read(path).map_err(|source| DetectorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}
