//! LLCK v1: `LLCK` magic, u32 LE header length, JSON header, then
//! little-endian f64 payload. The header carries config, provenance, the
//! SHA-256 of the payload and an ordered tensor directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{expected_shapes, ModelCheckpoint, ModelConfig, ModelError, Provenance, Weights};
use crate::tensor::Tensor;

pub const LLCK_MAGIC: &[u8; 4] = b"LLCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    provenance: Provenance,
    payload_digest: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
}

pub fn write_checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>, ModelError> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.weights.named() {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&t.to_le_bytes());
    }
    let header = Header {
        format: "LLCK".into(),
        version: VERSION,
        config: ckpt.config.clone(),
        provenance: ckpt.provenance.clone(),
        payload_digest: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(LLCK_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, ModelError> {
    let fmt = |m: String| ModelError::Format(m);
    if bytes.len() < 8 || &bytes[..4] != LLCK_MAGIC {
        return Err(fmt("missing LLCK magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(fmt(format!("header truncated: need {} more bytes", 8 + hlen - bytes.len())));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.format != "LLCK" || header.version != VERSION {
        return Err(fmt(format!("unsupported format {} v{}", header.format, header.version)));
    }
    header.config.validate()?;
    let payload = &bytes[8 + hlen..];
    let expected = expected_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(fmt(format!("directory lists {} tensors, config needs {}", header.tensors.len(), expected.len())));
    }
    let needed: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    if payload.len() < needed {
        return Err(fmt(format!("payload truncated: missing {} bytes", needed - payload.len())));
    }
    if payload.len() > needed {
        return Err(fmt(format!("{} trailing bytes after payload", payload.len() - needed)));
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.payload_digest {
        return Err(ModelError::DigestMismatch {
            expected: header.payload_digest,
            actual,
        });
    }
    let mut weights = Weights::zeros(&header.config);
    for ((entry, (ename, eshape)), (_, slot)) in header.tensors.iter().zip(&expected).zip(weights.named_mut()) {
        if &entry.name != ename || &entry.shape != eshape {
            return Err(fmt(format!("tensor {} {:?} where {} {:?} expected", entry.name, entry.shape, ename, eshape)));
        }
        let n: usize = eshape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(fmt(format!("tensor {} runs past payload end", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::new(eshape.clone(), data)?;
    }
    ModelCheckpoint::new(header.config, weights, header.provenance)
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &ModelCheckpoint) -> Result<(), ModelError> {
    let bytes = write_checkpoint_bytes(ckpt)?;
    let path = path.as_ref();
    let tmp = path.with_extension("llck.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint, ModelError> {
    read_checkpoint_bytes(&std::fs::read(path)?)
}
