//! Metric-aligned embeddings for codebook tokens.
//!
//! Each token owns a unit vector. Training pulls the anchor toward a near
//! neighbour and pushes it from a far one with a triplet-margin hinge, so that
//! embedding distances end up ordered like scalar differences.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookSpec, TokenId};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::rng;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"WAMFEMB1";

/// Share of near offsets drawn uniformly over the whole codebook instead of
/// from the geometric law. Without them nothing orders pairs that are both
/// more than a few tokens from the anchor.
pub const DEFAULT_GLOBAL_FRACTION: f64 = 0.08;

/// Largest near-neighbour offset the default sampler draws, in tokens.
pub const MAX_NEAR_OFFSET: usize = 32;

/// `N x d` table of unit-norm rows, row `k` embedding codebook value `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Rows drawn from an isotropic Gaussian and projected to the sphere.
    pub fn random(n: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0xE1B]);
        let data = (0..n * dim).map(|_| rng::normal(&mut r)).collect();
        let mut table = EmbeddingTable { dim, data };
        table.normalize_rows();
        table
    }

    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingTable { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn normalize_rows(&mut self) {
        for row in self.data.chunks_mut(self.dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    pub fn max_norm_error(&self) -> f64 {
        self.data
            .chunks(self.dim)
            .map(|row| (row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the `WAMFEMB1` container: magic, min/max/resolution as f64,
    /// N and d as u64, then N*d f64 in row-major order, all little-endian.
    pub fn write_to<W: Write>(&self, spec: &CodebookSpec, mut w: W) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        for v in [spec.min, spec.max, spec.resolution] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<(CodebookSpec, Self), String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != EMBEDDING_MAGIC {
            return Err("missing WAMFEMB1 header".into());
        }
        let mut f = [0.0f64; 3];
        for v in f.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let n = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let spec = CodebookSpec::new(f[0], f[1], f[2]).map_err(|e| e.to_string())?;
        if spec.size() != n {
            return Err(format!("codebook has {} entries but header says {n}", spec.size()));
        }
        let mut data = vec![0.0; n * dim];
        for v in data.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let table = EmbeddingTable::from_rows(dim, data).map_err(|e| e.to_string())?;
        Ok((spec, table))
    }

    pub fn save(&self, spec: &CodebookSpec, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(spec, std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(CodebookSpec, Self)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::result::Result<f64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u64::from_le_bytes(b))
}

/// `max(0, d_near - d_far + margin)`.
pub fn triplet_margin_loss(d_near: f64, d_far: f64, margin: f64) -> Result<f64> {
    if d_near < 0.0 || d_far < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "distances must be nonnegative (got {d_near}, {d_far})"
        )));
    }
    if margin <= 0.0 {
        return Err(Error::InvalidArgument(format!("margin {margin} must be positive")));
    }
    Ok((d_near - d_far + margin).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: TokenId,
    pub near: TokenId,
    pub far: TokenId,
}

/// Draws `count` triplets with `|v_a - v_near| < |v_a - v_far|`.
///
/// Near offsets follow `P(o) ∝ 2^-o` on `1..=32` tokens (direction chosen at
/// random); the far token is uniform over every token strictly farther from
/// the anchor than the near one.
pub fn sample_triplets(spec: &CodebookSpec, count: usize, seed: u64) -> Result<Vec<Triplet>> {
    sample_triplets_mixed(spec, count, seed, DEFAULT_GLOBAL_FRACTION)
}

pub fn sample_triplets_mixed(
    spec: &CodebookSpec,
    count: usize,
    seed: u64,
    global_fraction: f64,
) -> Result<Vec<Triplet>> {
    spec.validate()?;
    let n = spec.size();
    if n < 3 {
        return Err(Error::InvalidCodebook("triplets need at least 3 tokens".into()));
    }
    let mut r = rng::stream(seed, &[0x7819]);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = r.gen_range(0..n);
        let o = if r.gen::<f64>() < global_fraction {
            r.gen_range(1..n - 1)
        } else {
            near_offset(&mut r)
        };
        let left_ok = a >= o;
        let right_ok = a + o < n;
        let near = match (left_ok, right_ok) {
            (true, true) => {
                if r.gen::<bool>() {
                    a - o
                } else {
                    a + o
                }
            }
            (true, false) => a - o,
            (false, true) => a + o,
            (false, false) => continue,
        };
        // Tokens strictly farther than `o`: [0, a-o) and (a+o, n).
        let left = a.saturating_sub(o);
        let right = n.saturating_sub(a + o + 1);
        if left + right == 0 {
            continue;
        }
        let pick = r.gen_range(0..left + right);
        let far = if pick < left { pick } else { a + o + 1 + (pick - left) };
        out.push(Triplet {
            anchor: TokenId::from_index(a),
            near: TokenId::from_index(near),
            far: TokenId::from_index(far),
        });
    }
    Ok(out)
}

fn near_offset<R: Rng>(r: &mut R) -> usize {
    // Inverse-CDF draw from the truncated geometric distribution.
    let total = 1.0 - 0.5f64.powi(MAX_NEAR_OFFSET as i32);
    let u = r.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut p = 0.5;
    for o in 1..=MAX_NEAR_OFFSET {
        acc += p;
        if u < acc {
            return o;
        }
        p *= 0.5;
    }
    MAX_NEAR_OFFSET
}

/// Average hinge loss of `table` over `triplets`.
pub fn mean_triplet_loss(table: &EmbeddingTable, triplets: &[Triplet], margin: f64) -> f64 {
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let dn = table.distance(t.anchor.index(), t.near.index());
            let df = table.distance(t.anchor.index(), t.far.index());
            (dn - df + margin).max(0.0)
        })
        .sum();
    total / triplets.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub margin: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_global_fraction")]
    pub global_fraction: f64,
}

fn default_global_fraction() -> f64 {
    DEFAULT_GLOBAL_FRACTION
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            dim: 32,
            lr: 1e-4,
            steps: 250_000,
            batch: 80,
            margin: 0.05,
            weight_decay: 0.01,
            seed: 0,
            global_fraction: DEFAULT_GLOBAL_FRACTION,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedTrainOutput {
    pub table: EmbeddingTable,
    /// Mean hinge loss of each training batch, before the update.
    pub loss_trace: Vec<f64>,
}

/// Trains a table from a random start with AdamW, projecting every row back
/// to the unit sphere after each update.
pub fn train_embeddings(spec: &CodebookSpec, cfg: &EmbedTrainConfig) -> Result<EmbedTrainOutput> {
    spec.validate()?;
    if cfg.dim == 0 || cfg.batch == 0 {
        return Err(Error::Config("embedding dim and batch must be positive".into()));
    }
    let n = spec.size();
    let mut table = EmbeddingTable::random(n, cfg.dim, cfg.seed);
    let mut state = AdamWState::zeros(table.data.len());
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut grad = vec![0.0; table.data.len()];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_triplets_mixed(
            spec,
            cfg.batch,
            rng::derive_seed(cfg.seed, &[step as u64]),
            cfg.global_fraction,
        )?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = triplet_batch_grad(&table, &batch, cfg.margin, &mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "triplet loss".into(),
            });
        }
        trace.push(loss);
        adamw_step(&mut table.data, &grad, &mut state, cfg.lr, &opt);
        table.normalize_rows();
    }
    Ok(EmbedTrainOutput {
        table,
        loss_trace: trace,
    })
}

/// Accumulates the gradient of the mean hinge loss into `grad` and returns
/// the loss.
fn triplet_batch_grad(table: &EmbeddingTable, batch: &[Triplet], margin: f64, grad: &mut [f64]) -> f64 {
    let dim = table.dim;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        let (a, j, k) = (t.anchor.index(), t.near.index(), t.far.index());
        let dn = table.distance(a, j);
        let df = table.distance(a, k);
        let l = dn - df + margin;
        if l <= 0.0 {
            continue;
        }
        total += l;
        for c in 0..dim {
            let za = table.data[a * dim + c];
            let gn = if dn > 1e-12 { (za - table.data[j * dim + c]) / dn } else { 0.0 };
            let gf = if df > 1e-12 { (za - table.data[k * dim + c]) / df } else { 0.0 };
            grad[a * dim + c] += scale * (gn - gf);
            grad[j * dim + c] -= scale * gn;
            grad[k * dim + c] += scale * gf;
        }
    }
    total * scale
}

/// Spearman correlation between `|v_i - v_j|` and `||z_i - z_j||` over all
/// unordered pairs `i < j`.
pub fn all_pairs_spearman(spec: &CodebookSpec, table: &EmbeddingTable) -> f64 {
    let n = table.len();
    let mut gaps = Vec::with_capacity(n * (n - 1) / 2);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            gaps.push((spec.value_of(i) - spec.value_of(j)).abs());
            dists.push(table.distance(i, j));
        }
    }
    crate::stats::spearman(&gaps, &dists)
}

/// Fraction of sampled `(j, k)` pairs with `|v_i - v_j| < |v_i - v_k|` whose
/// embedding distances are ordered the same way, for a fixed anchor `i`.
pub fn anchor_order_agreement(table: &EmbeddingTable, anchor: usize, samples: usize, seed: u64) -> f64 {
    let n = table.len();
    let mut r = rng::stream(seed, &[anchor as u64, 0xA11]);
    let mut agree = 0usize;
    let mut seen = 0usize;
    while seen < samples {
        let j = r.gen_range(0..n);
        let k = r.gen_range(0..n);
        let gj = j.abs_diff(anchor);
        let gk = k.abs_diff(anchor);
        if gj == gk {
            continue;
        }
        let (near, far) = if gj < gk { (j, k) } else { (k, j) };
        seen += 1;
        if table.distance(anchor, near) < table.distance(anchor, far) {
            agree += 1;
        }
    }
    agree as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_margin_loss(0.3, 0.5, 0.05).unwrap(), 0.0);
        assert!((triplet_margin_loss(0.5, 0.3, 0.05).unwrap() - 0.25).abs() < 1e-12);
        assert!((triplet_margin_loss(0.3, 0.3, 0.05).unwrap() - 0.05).abs() < 1e-12);
        assert!(triplet_margin_loss(-0.1, 0.3, 0.05).is_err());
    }

    #[test]
    fn triplets_ordered_and_deterministic() {
        let spec = CodebookSpec::desk();
        let ts = sample_triplets(&spec, 10_000, 9).unwrap();
        for t in &ts {
            let a = t.anchor.index();
            assert!(a.abs_diff(t.near.index()) < a.abs_diff(t.far.index()));
        }
        assert_eq!(ts, sample_triplets(&spec, 10_000, 9).unwrap());
        assert_ne!(ts, sample_triplets(&spec, 10_000, 10).unwrap());
        let close = ts
            .iter()
            .filter(|t| t.anchor.index().abs_diff(t.near.index()) <= 10)
            .count();
        assert!(close as f64 / ts.len() as f64 >= 0.9);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let spec = CodebookSpec::new(0.0, 2.0, 0.1).unwrap();
        let table = EmbeddingTable::random(spec.size(), 4, 5);
        let batch = sample_triplets(&spec, 64, 1).unwrap();
        let mut grad = vec![0.0; table.data.len()];
        triplet_batch_grad(&table, &batch, 0.05, &mut grad);
        let eps = 1e-6;
        for idx in (0..table.data.len()).step_by(7) {
            let mut plus = table.clone();
            plus.data[idx] += eps;
            let mut minus = table.clone();
            minus.data[idx] -= eps;
            let fd = (mean_triplet_loss(&plus, &batch, 0.05) - mean_triplet_loss(&minus, &batch, 0.05))
                / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-6, "coord {idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = CodebookSpec::desk();
        let t = EmbeddingTable::random(spec.size(), 8, 2);
        let mut buf = Vec::new();
        t.write_to(&spec, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"WAMFEMB1");
        assert_eq!(buf.len(), 8 + 24 + 16 + 161 * 8 * 8);
        let (s2, t2) = EmbeddingTable::read_from(&buf[..]).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(t2, t);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(EmbeddingTable::read_from(&bad[..]).is_err());
    }

    #[test]
    fn random_rows_are_unit() {
        let t = EmbeddingTable::random(50, 32, 1);
        assert!(t.max_norm_error() < 1e-12);
    }
}
