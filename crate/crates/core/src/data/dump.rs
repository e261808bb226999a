//! ATND v1: `ATND` magic, u32 LE manifest length, JSON manifest, then
//! N·L·H row-major T×T matrices in (sequence, layer, head) order.

use std::borrow::Cow;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const ATND_MAGIC: &[u8; 4] = b"ATND";
const VERSION: u32 = 1;
const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    pub version: u32,
    pub model_id: String,
    pub model_digest: String,
    /// Sequence count.
    pub n: usize,
    /// Tokens per sequence.
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    pub dataset_id: String,
    pub causal: bool,
    pub created_unix: u64,
    #[serde(default)]
    pub dtype: Dtype,
}

impl DumpManifest {
    pub fn new(model_id: impl Into<String>, n: usize, t: usize, layers: usize, heads: usize) -> Self {
        Self {
            format: "ATND".into(),
            version: VERSION,
            model_id: model_id.into(),
            model_digest: String::new(),
            n,
            t,
            layers,
            heads,
            dataset_id: String::new(),
            causal: true,
            created_unix: 0,
            dtype: Dtype::F64,
        }
    }

    pub fn matrix_count(&self) -> usize {
        self.n * self.layers * self.heads
    }

    pub fn matrix_len(&self) -> usize {
        self.t * self.t
    }

    /// Flat matrix index of `(seq, layer, head)`.
    pub fn index(&self, seq: usize, layer: usize, head: usize) -> usize {
        (seq * self.layers + layer) * self.heads + head
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        (index / (self.layers * self.heads), (index / self.heads) % self.layers, index % self.heads)
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.matrix_count() * self.matrix_len() * self.dtype.width()) as u64
    }

    fn check(&self) -> Result<(), DataError> {
        if self.format != "ATND" || self.version != VERSION {
            return Err(DataError::Format(format!("unsupported dump format {} v{}", self.format, self.version)));
        }
        if self.n == 0 || self.t == 0 || self.layers == 0 || self.heads == 0 {
            return Err(DataError::Format(format!(
                "manifest has a zero count (n={}, t={}, layers={}, heads={})",
                self.n, self.t, self.layers, self.heads
            )));
        }
        Ok(())
    }
}

/// Random access to the matrices of a dump.
pub trait AttentionSource: Sync {
    fn manifest(&self) -> &DumpManifest;
    /// Matrix at flat index (see [`DumpManifest::index`]); `None` when the
    /// backing store does not hold it.
    fn matrix_at(&self, index: usize) -> Result<Option<Cow<'_, [f64]>>, DataError>;
}

/// A dump held fully in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub manifest: DumpManifest,
    data: Vec<f64>,
}

impl AttentionDump {
    pub fn new(manifest: DumpManifest, data: Vec<f64>) -> Result<Self, DataError> {
        manifest.check()?;
        let declared = manifest.matrix_count() as u64;
        let tt = manifest.matrix_len();
        if data.len() % tt != 0 || data.len() / tt != declared as usize {
            return Err(DataError::CountMismatch {
                declared,
                actual: (data.len() / tt) as u64,
            });
        }
        Ok(Self { manifest, data })
    }

    pub fn matrix(&self, seq: usize, layer: usize, head: usize) -> &[f64] {
        let tt = self.manifest.matrix_len();
        let i = self.manifest.index(seq, layer, head);
        &self.data[i * tt..(i + 1) * tt]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Every row sums to 1 within 1e-6 over its support, entries are
    /// finite and nonnegative, and for causal dumps the strict upper
    /// triangle is (within tolerance) empty.
    pub fn validate(&self) -> Result<(), DataError> {
        let m = &self.manifest;
        let t = m.t;
        for idx in 0..m.matrix_count() {
            let (seq, layer, head) = m.coords(idx);
            let a = &self.data[idx * t * t..(idx + 1) * t * t];
            for row in 0..t {
                let r = &a[row * t..(row + 1) * t];
                let support = if m.causal { &r[..=row] } else { r };
                let bad = |sum| DataError::NotStochastic { seq, layer, head, row, sum };
                if r.iter().any(|v| !v.is_finite() || *v < -ROW_TOLERANCE) {
                    return Err(bad(f64::NAN));
                }
                let sum: f64 = support.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(bad(sum));
                }
                if m.causal && r[row + 1..].iter().any(|v| v.abs() > ROW_TOLERANCE) {
                    return Err(bad(r.iter().sum()));
                }
            }
        }
        Ok(())
    }
}

impl AttentionSource for AttentionDump {
    fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    fn matrix_at(&self, index: usize) -> Result<Option<Cow<'_, [f64]>>, DataError> {
        let tt = self.manifest.matrix_len();
        Ok(self.data.get(index * tt..(index + 1) * tt).map(Cow::Borrowed))
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<(DumpManifest, usize), DataError> {
    if bytes.len() < 8 || &bytes[..4] != ATND_MAGIC {
        return Err(DataError::Format("missing ATND magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(DataError::Truncated {
            missing: (8 + hlen - bytes.len()) as u64,
        });
    }
    let manifest: DumpManifest = serde_json::from_slice(&bytes[8..8 + hlen])?;
    manifest.check()?;
    Ok((manifest, 8 + hlen))
}

pub fn write_dump_bytes(dump: &AttentionDump) -> Result<Vec<u8>, DataError> {
    dump.manifest.check()?;
    let json = serde_json::to_vec(&dump.manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + dump.manifest.payload_bytes() as usize);
    out.extend_from_slice(ATND_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match dump.manifest.dtype {
        Dtype::F64 => dump.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => dump.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

pub fn read_dump_bytes(bytes: &[u8]) -> Result<AttentionDump, DataError> {
    let (manifest, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    let need = manifest.payload_bytes();
    let have = payload.len() as u64;
    if have < need {
        return Err(DataError::Truncated { missing: need - have });
    }
    if have > need {
        let per = (manifest.matrix_len() * manifest.dtype.width()) as u64;
        return Err(DataError::CountMismatch {
            declared: manifest.matrix_count() as u64,
            actual: have / per,
        });
    }
    let data = decode(payload, manifest.dtype);
    AttentionDump::new(manifest, data)
}

pub fn write_dump(path: impl AsRef<Path>, dump: &AttentionDump) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, write_dump_bytes(dump)?).map_err(|source| DataError::Open {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<AttentionDump, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Open {
        path: path.display().to_string(),
        source,
    })?;
    read_dump_bytes(&bytes)
}

/// A dump read matrix by matrix from disk. Matrices beyond the end of a
/// truncated file are reported as absent rather than failing the open.
#[derive(Debug)]
pub struct DumpFile {
    path: PathBuf,
    manifest: DumpManifest,
    payload_start: u64,
    available: usize,
    file: Mutex<File>,
}

impl DumpFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref().to_path_buf();
        let open_err = |source| DataError::Open {
            path: path.display().to_string(),
            source,
        };
        let mut file = File::open(&path).map_err(open_err)?;
        let mut head = [0u8; 8];
        file.read_exact(&mut head)
            .map_err(|_| DataError::Format("missing ATND magic".into()))?;
        if &head[..4] != ATND_MAGIC {
            return Err(DataError::Format("missing ATND magic".into()));
        }
        let hlen = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let len = file.metadata()?.len();
        if len < 8 + hlen as u64 {
            return Err(DataError::Truncated {
                missing: 8 + hlen as u64 - len,
            });
        }
        let mut bytes = vec![0u8; 8 + hlen];
        bytes[..8].copy_from_slice(&head);
        file.read_exact(&mut bytes[8..])?;
        let (manifest, start) = parse_header(&bytes)?;
        let per = (manifest.matrix_len() * manifest.dtype.width()) as u64;
        let stored = len.saturating_sub(start as u64);
        if stored > manifest.payload_bytes() {
            return Err(DataError::CountMismatch {
                declared: manifest.matrix_count() as u64,
                actual: stored / per,
            });
        }
        let available = (stored / per) as usize;
        Ok(Self {
            path,
            manifest,
            payload_start: start as u64,
            available,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_complete(&self) -> bool {
        self.available == self.manifest.matrix_count()
    }

    /// Loads everything; fails on truncation like [`read_dump`].
    pub fn load(&self) -> Result<AttentionDump, DataError> {
        read_dump(&self.path)
    }
}

impl AttentionSource for DumpFile {
    fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    fn matrix_at(&self, index: usize) -> Result<Option<Cow<'_, [f64]>>, DataError> {
        if index >= self.available {
            return Ok(None);
        }
        let width = self.manifest.dtype.width();
        let per = self.manifest.matrix_len() * width;
        let mut buf = vec![0u8; per];
        {
            let mut f = self.file.lock().expect("dump file lock");
            f.seek(SeekFrom::Start(self.payload_start + (index * per) as u64))?;
            f.read_exact(&mut buf)?;
        }
        Ok(Some(Cow::Owned(decode(&buf, self.manifest.dtype))))
    }
}
