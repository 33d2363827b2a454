//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `RIPL0001`, a little-endian `u32` header
//! length, a JSON header, then the tensors as raw little-endian `f64`s.
//! The header lists every tensor's name, shape, dtype and byte offset into
//! the payload, the model config, and a SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::autodiff::{Params, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RIPL0001";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(model.param_count() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing RIPL0001 magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &body[len..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let mut params = Params::new();
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let end = t.offset + n * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", t.name)));
        }
        let data = payload[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    Model::from_params(header.config, params).map_err(|e| e.context("checkpoint"))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?).map_err(|e| Error::from(e).context(path.display().to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    read_checkpoint(&bytes).map_err(|e| e.context(path.display().to_string()))
}
