//! Memory bank of normal patch embeddings and affinity-weighted scoring.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f32s, read_preamble, write_f32s, write_preamble};
use crate::encoder::{Embedding, Model, Scale};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{gemm, MatMut, MatRef};

const MAGIC: &[u8; 8] = b"PCTXBANK";
pub const BANK_VERSION: u32 = 1;

/// Queries per GEMM block in batched neighbour search.
const QUERY_BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityConfig {
    /// Neighbours retrieved per query.
    pub eta: usize,
    /// Upper bound on the pre-softmax affinity.
    pub lambda_cap: f64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            eta: 10,
            lambda_cap: 20.0,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta == 0 {
            return Err(Error::Config("eta must be at least 1".into()));
        }
        if !(self.lambda_cap > 1.0 && self.lambda_cap.is_finite()) {
            return Err(Error::Config(format!("lambda_cap must exceed 1, got {}", self.lambda_cap)));
        }
        Ok(())
    }
}

/// Where a bank row was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: u32,
    pub top: u32,
    pub left: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    scale: Scale,
    stride: usize,
    dim: usize,
    features: Vec<f32>,
    provenance: Vec<Provenance>,
    sq_norms: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub rows: Vec<usize>,
    /// Euclidean distances, ascending; ties keep the lower row first.
    pub distances: Vec<f64>,
}

fn sq_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum()
}

fn exact_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn by_distance_then_row(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl MemoryBank {
    pub fn from_rows(scale: Scale, stride: usize, dim: usize, features: Vec<f32>, provenance: Vec<Provenance>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("bank stride must be at least 1".into()));
        }
        if dim == 0 || !features.len().is_multiple_of(dim) || features.len() / dim != provenance.len() {
            return Err(Error::shape(
                "memory bank",
                format!("{} rows of {dim}", provenance.len()),
                features.len(),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("memory bank holds a non-finite feature".into()));
        }
        let sq_norms = features.chunks_exact(dim).map(sq_norm).collect();
        Ok(Self {
            scale,
            stride,
            dim,
            features,
            provenance,
            sq_norms,
        })
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Keeps a seeded uniform subset of at most `max_rows` rows, in original order.
    pub fn subsample(&self, max_rows: usize, seed: u64) -> Result<MemoryBank> {
        if max_rows >= self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, self.len(), max_rows).into_vec();
        keep.sort_unstable();
        let mut features = Vec::with_capacity(max_rows * self.dim);
        for &i in &keep {
            features.extend_from_slice(self.row(i));
        }
        let provenance = keep.iter().map(|&i| self.provenance[i]).collect();
        MemoryBank::from_rows(self.scale, self.stride, self.dim, features, provenance)
    }

    fn check_query(&self, query: &[f32], eta: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::shape("memory query", self.dim, query.len()));
        }
        if eta == 0 || eta > self.len() {
            return Err(Error::InvalidInput(format!(
                "eta={eta} neighbours requested from a bank of {} rows",
                self.len()
            )));
        }
        Ok(())
    }

    /// Exact `eta` nearest rows of one query.
    pub fn nearest(&self, query: &Embedding, eta: usize) -> Result<Neighbors> {
        if query.scale != self.scale {
            return Err(Error::ScaleMismatch(format!(
                "{} query against a {} bank",
                query.scale, self.scale
            )));
        }
        Ok(self.nearest_rows(&query.vector, eta)?.remove(0))
    }

    /// Exact `eta` nearest rows of each query in a row-major `Q×dim` block.
    ///
    /// Candidates come from a single-precision GEMM expansion of the squared
    /// distance; every row within the expansion's rounding bound of the
    /// `eta`-th candidate is then re-ranked with double-precision distances.
    pub fn nearest_rows(&self, queries: &[f32], eta: usize) -> Result<Vec<Neighbors>> {
        if !queries.len().is_multiple_of(self.dim) {
            return Err(Error::shape("memory queries", format!("multiple of {}", self.dim), queries.len()));
        }
        let q_count = queries.len() / self.dim;
        for q in queries.chunks_exact(self.dim) {
            self.check_query(q, eta)?;
        }
        let m = self.len();
        let max_norm = self.sq_norms.iter().copied().fold(0.0f32, f32::max);
        let mut out = Vec::with_capacity(q_count);
        let mut dots = vec![0.0f32; QUERY_BLOCK.min(q_count.max(1)) * m];
        for start in (0..q_count).step_by(QUERY_BLOCK) {
            let qb = QUERY_BLOCK.min(q_count - start);
            let block = &queries[start * self.dim..(start + qb) * self.dim];
            gemm(
                qb,
                self.dim,
                m,
                1.0,
                MatRef { data: block, offset: 0, rs: self.dim, cs: 1 },
                MatRef { data: &self.features, offset: 0, rs: 1, cs: self.dim },
                0.0,
                MatMut { data: &mut dots, offset: 0, rs: m, cs: 1 },
            );
            let mut approx = vec![0.0f32; m];
            for (i, q) in block.chunks_exact(self.dim).enumerate() {
                let qn = sq_norm(q);
                for (j, a) in approx.iter_mut().enumerate() {
                    *a = qn + self.sq_norms[j] - 2.0 * dots[i * m + j];
                }
                let mut sorted = approx.clone();
                let (_, kth, _) = sorted.select_nth_unstable_by(eta - 1, f32::total_cmp);
                let slack = 1e-4 * (qn + max_norm) + f32::MIN_POSITIVE;
                let cut = *kth + 2.0 * slack;
                let mut cands: Vec<(f64, usize)> = approx
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a <= cut)
                    .map(|(j, _)| (exact_distance(q, self.row(j)), j))
                    .collect();
                cands.sort_by(by_distance_then_row);
                cands.truncate(eta);
                out.push(Neighbors {
                    rows: cands.iter().map(|c| c.1).collect(),
                    distances: cands.iter().map(|c| c.0).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BankHeader {
            format_version: BANK_VERSION,
            scale: self.scale,
            stride: self.stride,
            rows: self.len(),
            dim: self.dim,
        };
        let json = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            write_preamble(w, MAGIC, BANK_VERSION, &json)?;
            write_f32s(w, &self.features)?;
            for p in &self.provenance {
                for v in [p.image_id, p.top, p.left] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MemoryBank> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (version, json) = read_preamble(&mut r, MAGIC, "bank")
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::Format(format!("{} is not a memory bank file", path.display())))?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!(
                "bank format version {version} is not supported (expected {BANK_VERSION})"
            )));
        }
        let h: BankHeader = serde_json::from_slice(&json)?;
        let features = read_f32s(&mut r, h.rows * h.dim).map_err(|e| Error::io(path, e))?;
        let mut table = vec![0u8; h.rows * 12];
        r.read_exact(&mut table).map_err(|e| Error::io(path, e))?;
        let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let provenance = table
            .chunks_exact(12)
            .map(|b| Provenance {
                image_id: word(&b[0..4]),
                top: word(&b[4..8]),
                left: word(&b[8..12]),
            })
            .collect();
        MemoryBank::from_rows(h.scale, h.stride, h.dim, features, provenance)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    format_version: u32,
    scale: Scale,
    stride: usize,
    rows: usize,
    dim: usize,
}

/// Encodes every sliding window of every image into one bank.
pub fn build_memory(model: &Model<f32>, images: &[Image], scale: Scale, stride: usize) -> Result<MemoryBank> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot build a memory bank from zero images".into()));
    }
    if stride == 0 {
        return Err(Error::Config("bank stride must be at least 1".into()));
    }
    if stride > scale.patch_size() {
        log::warn!(
            "bank stride {stride} exceeds the {}px patch; windows leave gaps",
            scale.patch_size()
        );
    }
    let mut features = Vec::new();
    let mut provenance = Vec::new();
    for (id, img) in images.iter().enumerate() {
        let win = model.embed_windows(img, scale, stride)?;
        for i in 0..win.grid.len() {
            let r = win.grid.rect(i);
            provenance.push(Provenance {
                image_id: id as u32,
                top: r.top as u32,
                left: r.left as u32,
            });
        }
        features.extend_from_slice(&win.data);
    }
    MemoryBank::from_rows(scale, stride, model.embed_dim(), features, provenance)
}

/// Softmax over capped inverse distance shares: `γᵢ = min(Σd / dᵢ, λ)`, `β = softmax(γ)`.
///
/// A zero distance takes `γ = λ`.
pub fn affinity_weights(distances: &[f64], lambda_cap: f64) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::InvalidInput("affinity weights need at least one distance".into()));
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
        return Err(Error::InvalidInput(format!("distance {d} is negative or not finite")));
    }
    let total: f64 = distances.iter().sum();
    let gamma: Vec<f64> = distances
        .iter()
        .map(|&d| if d == 0.0 { lambda_cap } else { (total / d).min(lambda_cap) })
        .collect();
    let top = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gamma.iter().map(|g| (g - top).exp()).collect();
    let norm: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / norm).collect())
}

/// Convex combination `Σ βᵢ pᵢ`.
pub fn fuse(features: &[&[f32]], weights: &[f64]) -> Result<Vec<f64>> {
    if features.is_empty() || features.len() != weights.len() {
        return Err(Error::shape("fusion weights", features.len(), weights.len()));
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("fusion features", dim, f.len()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("fusion weights sum to {total}, not 1")));
    }
    let mut fused = vec![0.0; dim];
    for (f, &w) in features.iter().zip(weights) {
        for (acc, &v) in fused.iter_mut().zip(f.iter()) {
            *acc += w * f64::from(v);
        }
    }
    Ok(fused)
}

/// Distance from `query` to the affinity-weighted fusion of its neighbours.
pub fn score_from_neighbors(query: &[f32], bank: &MemoryBank, neighbors: &Neighbors, eta: usize, lambda_cap: f64) -> Result<f64> {
    let eta = eta.min(neighbors.rows.len());
    let weights = affinity_weights(&neighbors.distances[..eta], lambda_cap)?;
    let rows: Vec<&[f32]> = neighbors.rows[..eta].iter().map(|&r| bank.row(r)).collect();
    let fused = fuse(&rows, &weights)?;
    Ok(query
        .iter()
        .zip(&fused)
        .map(|(q, f)| (f64::from(*q) - f).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn patch_score(query: &Embedding, bank: &MemoryBank, cfg: &AffinityConfig) -> Result<f64> {
    cfg.validate()?;
    let nn = bank.nearest(query, cfg.eta)?;
    score_from_neighbors(&query.vector, bank, &nn, cfg.eta, cfg.lambda_cap)
}
