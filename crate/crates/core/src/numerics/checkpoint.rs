//! Named-tensor container: a length-prefixed JSON header mapping each
//! tensor name to `{shape, dtype: "f64", byte_offset}`, followed by the
//! concatenated little-endian binary64 payloads.
//!
//! Layout: `[u64 LE header bytes][header JSON][payload]`. Offsets are
//! relative to the payload start, assigned contiguously in name order,
//! and validated against the payload length on load. An optional
//! `__config__` header entry carries the run configuration verbatim for
//! provenance; it has no payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value as Json};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const CONFIG_KEY: &str = "__config__";

/// Encode tensors (and an optional embedded config) to container bytes.
pub fn to_bytes(entries: &[(String, &Tensor)], config: Option<&Json>) -> Vec<u8> {
    let sorted: BTreeMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();

    let mut header = serde_json::Map::new();
    if let Some(cfg) = config {
        header.insert(
            CONFIG_KEY.to_string(),
            json!({ "dtype": "config", "json": cfg }),
        );
    }
    let mut offset = 0u64;
    for (name, t) in &sorted {
        header.insert(
            name.to_string(),
            json!({ "shape": t.shape(), "dtype": "f64", "byte_offset": offset }),
        );
        offset += (t.len() * 8) as u64;
    }
    let header_bytes = serde_json::to_vec(&Json::Object(header)).expect("header is valid json");

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &sorted {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode container bytes; `origin` names the source in errors.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<(Vec<(String, Tensor)>, Option<Json>)> {
    let bad = |detail: String| Error::checkpoint(origin, detail);

    if bytes.len() < 8 {
        return Err(bad("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if 8 + header_len > bytes.len() {
        return Err(bad(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Json = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| bad(format!("header is not valid json: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| bad("header is not a json object".into()))?;
    let payload = &bytes[8 + header_len..];

    let mut config = None;
    let mut tensors = Vec::new();
    let mut expected_offset = 0u64;
    for (name, desc) in header {
        if name == CONFIG_KEY {
            config = desc.get("json").cloned();
            continue;
        }
        let shape: Vec<usize> = desc
            .get("shape")
            .and_then(|s| serde_json::from_value(s.clone()).ok())
            .ok_or_else(|| bad(format!("tensor {name}: missing or malformed shape")))?;
        let dtype = desc.get("dtype").and_then(Json::as_str).unwrap_or("");
        if dtype != "f64" {
            return Err(bad(format!("tensor {name}: unsupported dtype {dtype:?}")));
        }
        let offset = desc
            .get("byte_offset")
            .and_then(Json::as_u64)
            .ok_or_else(|| bad(format!("tensor {name}: missing byte_offset")))?;
        if offset != expected_offset {
            return Err(bad(format!(
                "tensor {name}: byte_offset {offset} breaks contiguity (expected {expected_offset})"
            )));
        }
        let nbytes = shape.iter().product::<usize>() * 8;
        let end = offset as usize + nbytes;
        if end > payload.len() {
            return Err(bad(format!(
                "tensor {name}: span {offset}..{end} exceeds payload length {}",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[offset as usize..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name.clone(), Tensor::from_vec(shape, data)));
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(bad(format!(
            "payload length {} not fully covered by tensors (expected {expected_offset})",
            payload.len()
        )));
    }
    Ok((tensors, config))
}

pub fn save_tensors(
    path: &Path,
    entries: &[(String, &Tensor)],
    config: Option<&Json>,
) -> Result<()> {
    fs::write(path, to_bytes(entries, config)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Tensor)>, Option<Json>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes, &path.display().to_string())
}
