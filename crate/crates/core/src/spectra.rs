//! Approximate-rank and column-mass statistics of attention matrices,
//! aggregated over a dump, and lazy-layer classification.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{AttentionDump, AttentionSource, DataError, DumpManifest};
use crate::linalg::singular_values;
use crate::model::{forward, ModelCheckpoint, ModelError};
use crate::par;

/// Singular values below this fraction of σ₁ count as zero.
pub const RANK_FLOOR: f64 = 1e-12;
/// Threshold slack so that ratios such as 9/10 meet τ = 0.9 despite rounding.
pub const RATIO_SLACK: f64 = 1e-12;
/// A layer is lazy when its MaxRank rounds to 1.
pub const LAZY_MAX_RANK: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is all zeros")]
    ZeroMatrix,
    #[error("matrix of {len} values is not {t}x{t}")]
    Shape { len: usize, t: usize },
    #[error("threshold {0} outside (0,1)")]
    Threshold(f64),
    #[error("dump is missing {} matrices: {}", .missing.len(), format_gaps(.missing))]
    IncompleteDump { missing: Vec<(usize, usize, usize)> },
    #[error("layer group {start}..{end} invalid for {layers} layers")]
    Group { start: usize, end: usize, layers: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn format_gaps(missing: &[(usize, usize, usize)]) -> String {
    let shown: Vec<String> = missing.iter().take(8).map(|(s, l, h)| format!("(seq {s}, layer {l}, head {h})")).collect();
    let more = if missing.len() > 8 { format!(" and {} more", missing.len() - 8) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectraConfig {
    pub tau: f64,
    pub eta: f64,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self { tau: 0.9, eta: 0.9 }
    }
}

fn check_threshold(x: f64) -> Result<(), SpectraError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(SpectraError::Threshold(x))
    }
}

fn check_matrix(a: &[f64], t: usize) -> Result<(), SpectraError> {
    if a.len() != t * t || t == 0 {
        return Err(SpectraError::Shape { len: a.len(), t });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SpectraError::NonFinite);
    }
    if a.iter().all(|&v| v == 0.0) {
        return Err(SpectraError::ZeroMatrix);
    }
    Ok(())
}

/// Smallest `k` whose leading values hold at least `ratio` of the total
/// of `values` (already sorted descending and nonnegative).
fn cumulative_count(values: &[f64], ratio: f64) -> usize {
    let total: f64 = values.iter().sum();
    let target = (ratio - RATIO_SLACK) * total;
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if acc >= target {
            return i + 1;
        }
    }
    values.len()
}

/// Squared singular values with the numerical-rank floor applied.
fn spectrum_energy(a: &[f64], t: usize) -> Vec<f64> {
    let s = singular_values(t, t, a);
    let cutoff = s[0] * RANK_FLOOR;
    s.iter().map(|&x| if x < cutoff { 0.0 } else { x * x }).collect()
}

/// `k*`: fewest singular values whose squared sum reaches `tau` of the total.
pub fn approximate_rank(a: &[f64], t: usize, tau: f64) -> Result<usize, SpectraError> {
    check_threshold(tau)?;
    check_matrix(a, t)?;
    Ok(cumulative_count(&spectrum_energy(a, t), tau))
}

/// Squared column norms sorted descending.
fn column_masses(a: &[f64], t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t];
    for row in a.chunks_exact(t) {
        for (j, v) in row.iter().enumerate() {
            m[j] += v * v;
        }
    }
    m.sort_by(|x, y| y.total_cmp(x));
    m
}

/// `m*`: fewest columns whose squared mass reaches `eta` of ‖A‖_F².
pub fn column_mass_count(a: &[f64], t: usize, eta: f64) -> Result<usize, SpectraError> {
    check_threshold(eta)?;
    check_matrix(a, t)?;
    Ok(cumulative_count(&column_masses(a, t), eta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraReport {
    pub model_id: String,
    pub dump_digest: String,
    pub config: SpectraConfig,
    pub n: usize,
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    /// `rank[h][l]`: mean `k*` over sequences.
    pub rank: Vec<Vec<f64>>,
    pub max_rank: Vec<f64>,
    /// Mean of `max_rank` over all layers.
    pub avg_rank: f64,
    /// `mass[h][l]`: mean `m*` over sequences.
    pub mass: Vec<Vec<f64>>,
    pub avg_mass: Vec<f64>,
    pub lazy: Vec<bool>,
    pub lazy_rule: String,
}

impl SpectraReport {
    /// Mean MaxRank over `group`.
    pub fn avg_rank_of(&self, group: Range<usize>) -> Result<f64, SpectraError> {
        self.check_group(&group)?;
        Ok(self.max_rank[group.clone()].iter().sum::<f64>() / group.len() as f64)
    }

    fn check_group(&self, g: &Range<usize>) -> Result<(), SpectraError> {
        if g.start >= g.end || g.end > self.layers {
            return Err(SpectraError::Group {
                start: g.start,
                end: g.end,
                layers: self.layers,
            });
        }
        Ok(())
    }

    pub fn lazy_count(&self, group: Range<usize>) -> usize {
        self.lazy[group].iter().filter(|&&b| b).count()
    }
}

pub fn layer_is_lazy(max_rank: f64) -> bool {
    max_rank < LAZY_MAX_RANK
}

pub fn group_is_lazy(avg_rank: f64) -> bool {
    avg_rank.floor() == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazyClassification {
    pub group: Range<usize>,
    pub layers: Vec<bool>,
    pub avg_rank: f64,
    pub group_lazy: bool,
}

pub fn classify_lazy(report: &SpectraReport, group: Range<usize>) -> Result<LazyClassification, SpectraError> {
    let avg_rank = report.avg_rank_of(group.clone())?;
    Ok(LazyClassification {
        layers: report.max_rank[group.clone()].iter().map(|&r| layer_is_lazy(r)).collect(),
        group,
        avg_rank,
        group_lazy: group_is_lazy(avg_rank),
    })
}

/// AvgRank of every contiguous block of `width` layers, by start index.
pub fn block_avg_ranks(report: &SpectraReport, width: usize) -> Result<Vec<(usize, f64)>, SpectraError> {
    if width == 0 || width > report.layers {
        return Err(SpectraError::Group {
            start: 0,
            end: width,
            layers: report.layers,
        });
    }
    (0..=report.layers - width)
        .map(|s| Ok((s, report.avg_rank_of(s..s + width)?)))
        .collect()
}

/// Start of the block with the highest AvgRank (ties: earliest).
pub fn highest_rank_block(report: &SpectraReport, width: usize) -> Result<usize, SpectraError> {
    let b = block_avg_ranks(report, width)?;
    Ok(b.iter().fold(b[0], |best, &x| if x.1 > best.1 { x } else { best }).0)
}

/// Start of the block with the lowest AvgRank (ties: latest).
pub fn lowest_rank_block(report: &SpectraReport, width: usize) -> Result<usize, SpectraError> {
    let b = block_avg_ranks(report, width)?;
    Ok(b.iter().fold(b[0], |best, &x| if x.1 <= best.1 { x } else { best }).0)
}

struct MatrixStats {
    ranks: Vec<usize>,
    mass: usize,
    digest: [u8; 32],
}

fn matrix_stats(a: &[f64], t: usize, taus: &[f64], eta: f64) -> Result<MatrixStats, SpectraError> {
    check_matrix(a, t)?;
    let energy = spectrum_energy(a, t);
    let mut h = Sha256::new();
    for v in a {
        h.update(v.to_le_bytes());
    }
    Ok(MatrixStats {
        ranks: taus.iter().map(|&tau| cumulative_count(&energy, tau)).collect(),
        mass: cumulative_count(&column_masses(a, t), eta),
        digest: h.finalize().into(),
    })
}

/// One report per `tau`, sharing a single SVD per matrix.
pub fn tau_sweep<S: AttentionSource + ?Sized>(source: &S, taus: &[f64], eta: f64) -> Result<Vec<SpectraReport>, SpectraError> {
    if taus.is_empty() {
        return Err(SpectraError::Threshold(f64::NAN));
    }
    taus.iter().try_for_each(|&t| check_threshold(t))?;
    check_threshold(eta)?;
    let m = source.manifest().clone();
    let t = m.t;
    let stats = par::try_map_indexed(m.matrix_count(), |i| -> Result<Option<MatrixStats>, SpectraError> {
        match source.matrix_at(i)? {
            Some(a) => matrix_stats(&a, t, taus, eta).map(Some),
            None => Ok(None),
        }
    })?;
    let missing: Vec<_> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| m.coords(i))
        .collect();
    if !missing.is_empty() {
        return Err(SpectraError::IncompleteDump { missing });
    }
    let stats: Vec<MatrixStats> = stats.into_iter().flatten().collect();

    let mut digest = Sha256::new();
    stats.iter().for_each(|s| digest.update(s.digest));
    let dump_digest = hex::encode(digest.finalize());

    let n = m.n as f64;
    // Fixed summation order: sequences ascending for each (head, layer).
    let mean_over_seqs = |f: &dyn Fn(&MatrixStats) -> usize| -> Vec<Vec<f64>> {
        (0..m.heads)
            .map(|h| {
                (0..m.layers)
                    .map(|l| (0..m.n).map(|s| f(&stats[m.index(s, l, h)]) as f64).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    };
    let mass = mean_over_seqs(&|s| s.mass);
    let avg_mass: Vec<f64> = (0..m.layers)
        .map(|l| (0..m.heads).map(|h| mass[h][l]).sum::<f64>() / m.heads as f64)
        .collect();
    Ok(taus
        .iter()
        .enumerate()
        .map(|(ti, &tau)| build_report(&m, SpectraConfig { tau, eta }, mean_over_seqs(&|s| s.ranks[ti]), mass.clone(), avg_mass.clone(), dump_digest.clone()))
        .collect())
}

fn build_report(m: &DumpManifest, config: SpectraConfig, rank: Vec<Vec<f64>>, mass: Vec<Vec<f64>>, avg_mass: Vec<f64>, dump_digest: String) -> SpectraReport {
    let max_rank: Vec<f64> = (0..m.layers)
        .map(|l| (0..m.heads).map(|h| rank[h][l]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let avg_rank = max_rank.iter().sum::<f64>() / m.layers as f64;
    SpectraReport {
        model_id: m.model_id.clone(),
        dump_digest,
        config,
        n: m.n,
        t: m.t,
        layers: m.layers,
        heads: m.heads,
        lazy: max_rank.iter().map(|&r| layer_is_lazy(r)).collect(),
        rank,
        max_rank,
        avg_rank,
        mass,
        avg_mass,
        lazy_rule: format!("max_rank < {LAZY_MAX_RANK}"),
    }
}

pub fn aggregate_spectra<S: AttentionSource + ?Sized>(source: &S, config: SpectraConfig) -> Result<SpectraReport, SpectraError> {
    Ok(tau_sweep(source, &[config.tau], config.eta)?.remove(0))
}

/// Captures causal attention of `ckpt` on each sequence into a dump.
pub fn capture_dump(ckpt: &ModelCheckpoint, sequences: &[Vec<u32>], model_id: &str, dataset_id: &str) -> Result<AttentionDump, SpectraError> {
    let t = sequences.first().map_or(0, Vec::len);
    if sequences.iter().any(|s| s.len() != t) {
        return Err(DataError::InvalidArgument("sequences differ in length".into()).into());
    }
    let mut data = Vec::with_capacity(sequences.len() * ckpt.n_layers() * ckpt.config.n_heads * t * t);
    for s in sequences {
        let out = forward(ckpt, s, true)?;
        data.extend_from_slice(&out.attention.expect("capture requested")[0].data);
    }
    let mut manifest = DumpManifest::new(model_id, sequences.len(), t, ckpt.n_layers(), ckpt.config.n_heads);
    manifest.model_digest = ckpt.digest();
    manifest.dataset_id = dataset_id.to_string();
    manifest.created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    Ok(AttentionDump::new(manifest, data)?)
}
