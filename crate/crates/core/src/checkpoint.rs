//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (metadata plus tensor directory), then the tensor payload as
//! little-endian `f64`. The header carries a SHA-256 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CodeSelector, DenoiserParams, ItemEmbeddingTable, ModelConfig, ModelState};
use crate::optim::AdamState;
use crate::svq::Codebook;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"DQDIFFCK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step_count: u64,
    epoch: u64,
    adam_t: u64,
    codebook_usage: Vec<u64>,
    ema_decay: f64,
    payload_len: u64,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
    extra: serde_json::Value,
}

fn collect(state: &ModelState) -> Vec<(String, &Matrix)> {
    let named = state.named_params();
    let mut out: Vec<(String, &Matrix)> = named.iter().map(|(n, m)| (format!("param.{n}"), *m)).collect();
    for (i, c) in state.codebook.codes.iter().enumerate() {
        out.push((format!("codebook.{i}"), c));
    }
    for ((n, _), m) in named.iter().zip(&state.optimizer.first) {
        out.push((format!("adam.m.{n}"), m));
    }
    for ((n, _), v) in named.iter().zip(&state.optimizer.second) {
        out.push((format!("adam.v.{n}"), v));
    }
    out
}

/// Serializes `state` plus caller metadata `extra`.
pub fn to_bytes(state: &ModelState, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let tensors = collect(state);
    let mut payload = Vec::new();
    let mut dir = Vec::with_capacity(tensors.len());
    for (name, m) in &tensors {
        dir.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f64le".into(),
            offset: payload.len() as u64,
        });
        for v in m.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: state.config,
        step_count: state.step_count,
        epoch: state.epoch,
        adam_t: state.optimizer.t,
        codebook_usage: state.codebook.usage.clone(),
        ema_decay: state.codebook.ema_decay,
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors: dir,
        extra: extra.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(m.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelState, serde_json::Value)> {
    if bytes.len() < PREFIX_LEN {
        return Err(corrupt("file shorter than the fixed prefix"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREFIX_LEN..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() as u64 != header.payload_len {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }

    let read = |e: &TensorEntry| -> Result<Matrix> {
        if e.dtype != "f64le" {
            return Err(Error::IncompatibleCheckpoint(format!("dtype {}", e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(corrupt(format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::from_vec(e.shape[0], e.shape[1], data))
    };

    // Rebuild a zero state of the right shape, then fill it by name.
    let cfg = header.config;
    cfg.validate().map_err(|e| corrupt(format!("config: {e}")))?;
    let m = header.codebook_usage.len();
    let mut state = ModelState {
        config: cfg,
        embeddings: ItemEmbeddingTable(Matrix::zeros(cfg.item_count + 1, cfg.dim)),
        selector: CodeSelector::zeroed(&cfg),
        denoiser: DenoiserParams::zeroed(&cfg),
        codebook: Codebook::from_codes(vec![Matrix::zeros(cfg.max_len, cfg.dim); m], header.ema_decay),
        optimizer: AdamState::default(),
        step_count: header.step_count,
        epoch: header.epoch,
    };
    state.codebook.usage = header.codebook_usage.clone();
    state.optimizer = AdamState::zeros_like(&state.params());
    state.optimizer.t = header.adam_t;

    let expected: Vec<(String, [usize; 2])> = collect(&state).iter().map(|(n, t)| (n.clone(), [t.rows(), t.cols()])).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} tensors stored, model layout has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
        loaded.push(read(entry)?);
    }
    let n_params = state.params().len();
    let mut it = loaded.into_iter();
    for p in state.params_mut() {
        *p = it.next().expect("counted");
    }
    for c in &mut state.codebook.codes {
        *c = it.next().expect("counted");
    }
    state.optimizer.first = it.by_ref().take(n_params).collect();
    state.optimizer.second = it.collect();
    Ok((state, header.extra))
}

/// Writes through a temporary file and renames into place.
pub fn save_checkpoint_with(state: &ModelState, extra: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = to_bytes(state, extra)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    save_checkpoint_with(state, &serde_json::Value::Null, path)
}

pub fn load_checkpoint_with(path: &Path) -> Result<(ModelState, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    Ok(load_checkpoint_with(path)?.0)
}
