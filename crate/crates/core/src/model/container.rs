// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of JSON
//! mapping each tensor name to `{"dtype": "f32", "shape": [...], "offset",
//! "length"}` (byte offset and byte length within the data section), then
//! the concatenated little-endian f32 blobs. The model config lives in the
//! same JSON object under `"__config__"`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CONFIG_KEY: &str = "__config__";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Serializes `model` into `out`.
pub fn write_weights(model: &Model, mut out: impl Write) -> Result<()> {
    let mut header = serde_json::Map::new();
    header.insert(CONFIG_KEY.into(), serde_json::to_value(model.config())?);
    let mut offset = 0usize;
    let tensors = model.weights().named_tensors();
    for (name, t) in &tensors {
        let length = t.len() * 4;
        let entry = Entry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length,
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset += length;
    }
    let header = serde_json::Value::Object(header).to_string();
    let sink = |e| Error::io("<weights>", e);
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(sink)?;
    out.write_all(header.as_bytes()).map_err(sink)?;
    let mut blob = Vec::with_capacity(offset);
    for (_, t) in &tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&blob).map_err(sink)?;
    Ok(())
}

/// Parses a container from bytes.
pub fn read_weights(bytes: &[u8]) -> Result<Model> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Truncated("missing 8-byte header length".into()))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Format("header length does not fit in memory".into()))?;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header declares {header_len} bytes, file is shorter")))?;
    let mut header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let config: ModelConfig = header
        .remove(CONFIG_KEY)
        .ok_or_else(|| Error::Format(format!("header lacks `{CONFIG_KEY}`")))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("bad config: {e}"))))?;
    config.validate()?;
    let expected: BTreeMap<String, Vec<usize>> = config.tensor_shapes().into_iter().collect();
    let data = &bytes[header_end..];

    let mut named = BTreeMap::new();
    for (name, value) in header {
        if !expected.contains_key(&name) {
            return Err(Error::Format(format!("unknown tensor `{name}`")));
        }
        let entry: Entry = serde_json::from_value(value).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{name}` has unsupported dtype `{}`",
                entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        if count * 4 != entry.length {
            return Err(Error::Truncated(format!(
                "tensor `{name}` shape {:?} needs {} bytes, header declares {}",
                entry.shape,
                count * 4,
                entry.length
            )));
        }
        let blob = entry
            .offset
            .checked_add(entry.length)
            .and_then(|end| data.get(entry.offset..end))
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "tensor `{name}` spans bytes {}..{} but the data section holds {}",
                    entry.offset,
                    entry.offset + entry.length,
                    data.len()
                ))
            })?;
        let values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape, values).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        named.insert(name, tensor);
    }
    let weights = Weights::from_named(&config, named)?;
    Model::new(config, weights)
}

/// Writes the container to `path`.
pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a container from `path`.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes)
}
