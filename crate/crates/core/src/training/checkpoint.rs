//! Single-file checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "T3DCKPT\0"
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          payload: little-endian f64 tensors, back to back
//! ```
//!
//! The header carries the training config, its fingerprint, the step and
//! epoch counters, the optimizer step count, the serialized RNG, and a
//! manifest of tensors `{name, dtype, shape, offset}` with byte offsets
//! relative to the payload start. Tensor names are `param/<name>`,
//! `adam_m/<name>` and `adam_v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"T3DCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub fingerprint: String,
    pub step: u64,
    pub epoch: u64,
    pub optimizer_steps: u64,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, p) in state.model.store.iter() {
        push(format!("param/{}", p.name), p.value.shape(), p.value.data());
    }
    for (i, (_, p)) in state.model.store.iter().enumerate() {
        push(format!("adam_m/{}", p.name), p.value.shape(), &state.optimizer.m[i]);
    }
    for (i, (_, p)) in state.model.store.iter().enumerate() {
        push(format!("adam_v/{}", p.name), p.value.shape(), &state.optimizer.v[i]);
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        fingerprint: state.fingerprint.clone(),
        step: state.step,
        epoch: state.epoch,
        optimizer_steps: state.optimizer.t,
        rng: state.rng.clone(),
        config: state.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the header without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rest = &bytes[16..];
    if rest.len() < hlen {
        return Err(ckpt_err("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| ckpt_err(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported version {}", header.format_version)));
    }
    Ok((header, &rest[hlen..]))
}

fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    if entry.dtype != "f64" {
        return Err(ckpt_err(format!("tensor `{}` has dtype {}", entry.name, entry.dtype)));
    }
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 8 * n;
    if end > payload.len() {
        return Err(ckpt_err(format!("tensor `{}` runs past the payload", entry.name)));
    }
    let data = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&entry.shape, data))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (h, payload) = decode_header(bytes)?;
    let fingerprint = h.config.fingerprint()?;
    if fingerprint != h.fingerprint {
        return Err(ckpt_err("stored fingerprint does not match the stored config"));
    }
    let mut model = Model::new(&h.config.model, h.config.batch_size)?;
    let np = model.store.len();
    if h.tensors.len() != 3 * np {
        return Err(ckpt_err(format!("{} tensors, expected {}", h.tensors.len(), 3 * np)));
    }
    let mut params = Vec::with_capacity(np);
    for e in &h.tensors[..np] {
        let name = e
            .name
            .strip_prefix("param/")
            .ok_or_else(|| ckpt_err(format!("unexpected tensor `{}`", e.name)))?;
        params.push((name.to_string(), read_tensor(payload, e)?));
    }
    model.load_params(params)?;
    let mut optimizer = AdamW::new(h.config.optimizer, model.store.iter().map(|(_, p)| p.value.numel()));
    for (k, prefix) in ["adam_m/", "adam_v/"].iter().enumerate() {
        for (i, e) in h.tensors[(k + 1) * np..(k + 2) * np].iter().enumerate() {
            let pname = &model.store.iter().nth(i).unwrap().1.name;
            if e.name != format!("{prefix}{pname}") {
                return Err(ckpt_err(format!("unexpected tensor `{}`", e.name)));
            }
            let t = read_tensor(payload, e)?.into_data();
            if t.len() != optimizer.m[i].len() {
                return Err(ckpt_err(format!("tensor `{}` has the wrong size", e.name)));
            }
            if k == 0 {
                optimizer.m[i] = t;
            } else {
                optimizer.v[i] = t;
            }
        }
    }
    optimizer.t = h.optimizer_steps;
    Ok(TrainState {
        config: h.config,
        fingerprint,
        model,
        optimizer,
        step: h.step,
        epoch: h.epoch,
        rng: h.rng,
    })
}

/// Writes to a temporary sibling and renames over `path`.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint to continue a run under `config`; refuses when the
/// config fingerprints differ.
pub fn resume_checkpoint(path: impl AsRef<Path>, config: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let expected = config.fingerprint()?;
    if state.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: state.fingerprint,
        });
    }
    Ok(state)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
