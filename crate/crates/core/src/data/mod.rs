//! Byte-level corpora, deterministic batch sampling, and the on-disk
//! formats for attention dumps and reports.

mod dump;
pub mod report;
mod synthetic;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use dump::{read_dump, read_dump_bytes, write_dump, write_dump_bytes, AttentionDump, AttentionSource, DumpFile, DumpManifest, Dtype, ATND_MAGIC};
pub use synthetic::synthetic_text;

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("file truncated: missing {missing} bytes")]
    Truncated { missing: u64 },
    #[error("manifest declares {declared} matrices but payload holds {actual}")]
    CountMismatch { declared: u64, actual: u64 },
    #[error("matrix (seq {seq}, layer {layer}, head {head}) row {row} sums to {sum}")]
    NotStochastic { seq: usize, layer: usize, head: usize, row: usize, sum: f64 },
    #[error("{split:?} split has {len} bytes, need at least {need}")]
    SplitTooShort { split: Split, len: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// UTF-8 text as bytes, split into a leading train region and a trailing
/// validation region.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
    split_at: usize,
    digest: [u8; 32],
}

impl Corpus {
    /// Holds out the trailing `val_fraction` of `bytes` for validation.
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self, DataError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DataError::InvalidArgument(format!("val_fraction {val_fraction} not in (0,1)")));
        }
        let split_at = ((bytes.len() as f64) * (1.0 - val_fraction)).round() as usize;
        if split_at == 0 || split_at >= bytes.len() {
            return Err(DataError::InvalidArgument(format!(
                "corpus of {} bytes cannot be split with val_fraction {val_fraction}",
                bytes.len()
            )));
        }
        let digest = Sha256::digest(&bytes).into();
        Ok(Self { bytes, split_at, digest })
    }

    pub fn from_file(path: impl AsRef<Path>, val_fraction: f64) -> Result<Self, DataError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DataError::Open {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(bytes, val_fraction)
    }

    /// Generated English-like text; see [`synthetic_text`].
    pub fn synthetic(seed: u64, len: usize) -> Self {
        Self::from_bytes(synthetic_text(seed, len).into_bytes(), 0.1).expect("non-trivial corpus")
    }

    pub fn split(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.bytes[..self.split_at],
            Split::Val => &self.bytes[self.split_at..],
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// `batch_size` sequences of `seq_len` inputs with next-byte targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

fn stream(corpus: &Corpus, split: Split, seed: u64, step: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(corpus.digest);
    h.update([split as u8]);
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Window start offsets, uniform with replacement; a pure function of
/// `(corpus digest, split, seed, step)`.
pub fn sample_offsets(corpus: &Corpus, split: Split, count: usize, seq_len: usize, seed: u64, step: u64) -> Result<Vec<usize>, DataError> {
    let len = corpus.split(split).len();
    let need = seq_len + 1;
    if seq_len == 0 || len < need {
        return Err(DataError::SplitTooShort { split, len, need });
    }
    let max = len - need;
    let mut rng = stream(corpus, split, seed, step);
    Ok((0..count).map(|_| rng.random_range(0..=max)).collect())
}

pub fn sample_batch(corpus: &Corpus, split: Split, batch_size: usize, seq_len: usize, seed: u64, step: u64) -> Result<Batch, DataError> {
    let offsets = sample_offsets(corpus, split, batch_size, seq_len, seed, step)?;
    let data = corpus.split(split);
    let mut inputs = Vec::with_capacity(batch_size * seq_len);
    let mut targets = Vec::with_capacity(batch_size * seq_len);
    for o in offsets {
        inputs.extend(data[o..o + seq_len].iter().map(|&b| b as u32));
        targets.extend(data[o + 1..o + seq_len + 1].iter().map(|&b| b as u32));
    }
    Ok(Batch { inputs, targets, batch_size, seq_len })
}

/// Train/val batch source with fixed shape and seed.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    pub corpus: &'a Corpus,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Seed offset separating the held-out evaluation stream from training draws.
const EVAL_STREAM: u64 = 0x5EED_0E7A_1000_0000;

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a Corpus, batch_size: usize, seq_len: usize, seed: u64) -> Self {
        Self { corpus, batch_size, seq_len, seed }
    }

    pub fn train_batch(&self, step: u64) -> Result<Batch, DataError> {
        sample_batch(self.corpus, Split::Train, self.batch_size, self.seq_len, self.seed, step)
    }

    /// The fixed held-out evaluation set. It depends on the corpus and
    /// shape only, so every model evaluated with the same shape sees the
    /// same tokens regardless of its training seed.
    pub fn val_batches(&self, count: usize) -> Result<Vec<Batch>, DataError> {
        (0..count as u64)
            .map(|i| sample_batch(self.corpus, Split::Val, self.batch_size, self.seq_len, EVAL_STREAM, i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_step_same_batch() {
        let c = Corpus::synthetic(1, 20_000);
        let a = sample_batch(&c, Split::Train, 4, 16, 9, 3).unwrap();
        let b = sample_batch(&c, Split::Train, 4, 16, 9, 3).unwrap();
        let d = sample_batch(&c, Split::Train, 4, 16, 9, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn repeated_byte_targets() {
        let c = Corpus::from_bytes(vec![b'a'; 500], 0.2).unwrap();
        let b = sample_batch(&c, Split::Val, 3, 8, 0, 0).unwrap();
        assert!(b.targets.iter().all(|&t| t == b'a' as u32));
    }

    #[test]
    fn short_split_errors() {
        let c = Corpus::from_bytes(vec![b'x'; 100], 0.1).unwrap();
        assert!(matches!(
            sample_batch(&c, Split::Val, 1, 10, 0, 0),
            Err(DataError::SplitTooShort { len: 10, need: 11, .. })
        ));
        assert!(sample_batch(&c, Split::Val, 1, 9, 0, 0).is_ok());
    }

    #[test]
    fn splits_are_disjoint_and_nonempty() {
        let c = Corpus::from_bytes((0..=255u8).collect(), 0.25).unwrap();
        assert_eq!(c.split(Split::Train).len() + c.split(Split::Val).len(), 256);
        assert!(!c.split(Split::Val).is_empty());
        assert!(Corpus::from_bytes(vec![1], 0.5).is_err());
    }
}
