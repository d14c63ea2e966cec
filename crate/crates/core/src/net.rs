//! Posterior denoiser `p(x1^i | x_t, t, context)`: a two-layer tanh network
//! over the concatenated token, context and time features, with one linear
//! head per trajectory coordinate. Gradients are written out by hand.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookSpec, TokenId, TrajectoryTokens};
use crate::embedding::{read_f64, read_u64, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng;

pub const NET_MAGIC: &[u8; 8] = b"WAMFNET1";
pub const EGO_FIELDS: usize = 5;
pub const COMMANDS: usize = 3;
/// Number of learned time frequencies; each contributes a sine and a cosine.
pub const TIME_FREQS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Left, Command::Straight, Command::Right];

    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }
}

/// Conditioning: navigation command and quantized ego state
/// `(x, y, heading, v, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextEncoding {
    pub command: Command,
    pub ego: [TokenId; EGO_FIELDS],
}

impl ContextEncoding {
    pub fn quantize(command: Command, ego: [f64; EGO_FIELDS], spec: &CodebookSpec) -> Result<Self> {
        let mut toks = [TokenId(0); EGO_FIELDS];
        for (t, v) in toks.iter_mut().zip(ego) {
            *t = spec.quantize(v, false)?;
        }
        Ok(ContextEncoding { command, ego: toks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    /// Codebook size; also the output alphabet.
    pub vocab: usize,
    /// Trajectory coordinates.
    pub dims: usize,
    pub d_in: usize,
    pub hidden: usize,
}

impl Arch {
    pub fn desk() -> Self {
        Arch {
            vocab: 161,
            dims: crate::TRAJECTORY_DIMS,
            d_in: 32,
            hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.dims == 0 || self.d_in == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dims * self.d_in + COMMANDS + EGO_FIELDS * self.d_in + 2 * TIME_FREQS
    }

    pub fn outputs(&self) -> usize {
        self.dims * self.vocab
    }

    fn blocks(&self) -> Vec<(Block, usize)> {
        let (i, h, o) = (self.input_width(), self.hidden, self.outputs());
        vec![
            (Block::TokenEmbed, self.vocab * self.d_in),
            (Block::PosEmbed, self.dims * self.d_in),
            (Block::TimeFreq, TIME_FREQS),
            (Block::W1, h * i),
            (Block::B1, h),
            (Block::W2, h * h),
            (Block::B2, h),
            (Block::Wo, o * h),
            (Block::Bo, o),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.1).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    TokenEmbed,
    PosEmbed,
    TimeFreq,
    W1,
    B1,
    W2,
    B2,
    Wo,
    Bo,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::TokenEmbed,
        Block::PosEmbed,
        Block::TimeFreq,
        Block::W1,
        Block::B1,
        Block::W2,
        Block::B2,
        Block::Wo,
        Block::Bo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::TokenEmbed => "token_embed",
            Block::PosEmbed => "pos_embed",
            Block::TimeFreq => "time_freq",
            Block::W1 => "w1",
            Block::B1 => "b1",
            Block::W2 => "w2",
            Block::B2 => "b2",
            Block::Wo => "wo",
            Block::Bo => "bo",
        }
    }
}

/// All network parameters in one flat buffer, blocks laid out in
/// [`Block::ALL`] order. The token embedding block comes first so a frozen
/// table is simply excluded from the trainable range.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Arch,
    pub spec: CodebookSpec,
    pub train_embeddings: bool,
    pub data: Vec<f64>,
}

pub struct Example<'a> {
    pub x: &'a TrajectoryTokens,
    pub t: f64,
    pub ctx: &'a ContextEncoding,
}

/// Activations retained from a batched forward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    /// `B x (D * K)`, coordinate-major within a row.
    pub logits: Array2<f64>,
    tokens: Vec<Vec<usize>>,
    ego: Vec<[usize; EGO_FIELDS]>,
    times: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.logits.nrows()
    }

    /// Logits of example `b` as a `D x K` view.
    pub fn example_logits(&self, b: usize, arch: &Arch) -> ArrayView2<'_, f64> {
        self.logits
            .row(b)
            .into_shape_with_order((arch.dims, arch.vocab))
            .expect("contiguous logits row")
    }
}

impl PolicyParams {
    /// Random initialization around a given token embedding table. Hidden and
    /// head weights are scaled by `1/sqrt(fan_in)`; the output heads start
    /// small so the initial posterior is close to uniform.
    pub fn init(arch: Arch, spec: CodebookSpec, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        arch.validate()?;
        if table.len() != arch.vocab || table.dim() != arch.d_in || spec.size() != arch.vocab {
            return Err(Error::DimensionMismatch(format!(
                "embedding table {}x{} / codebook {} vs arch vocab {} d_in {}",
                table.len(),
                table.dim(),
                spec.size(),
                arch.vocab,
                arch.d_in
            )));
        }
        let mut p = PolicyParams {
            arch,
            spec,
            train_embeddings: false,
            data: vec![0.0; arch.param_count()],
        };
        p.block_mut(Block::TokenEmbed).copy_from_slice(table.as_slice());
        let mut r = rng::stream(seed, &[0x1417]);
        for v in p.block_mut(Block::PosEmbed) {
            *v = 0.1 * rng::normal(&mut r);
        }
        for (j, v) in p.block_mut(Block::TimeFreq).iter_mut().enumerate() {
            *v = std::f64::consts::PI * 2f64.powi(j as i32) / 2.0;
        }
        let fan = [
            (Block::W1, arch.input_width() as f64, 1.0),
            (Block::W2, arch.hidden as f64, 1.0),
            (Block::Wo, arch.hidden as f64, 0.1),
        ];
        for (b, fan_in, gain) in fan {
            let scale = gain / fan_in.sqrt();
            for v in p.block_mut(b) {
                *v = scale * rng::normal(&mut r);
            }
        }
        Ok(p)
    }

    pub fn block_range(&self, block: Block) -> Range<usize> {
        let mut start = 0;
        for (b, len) in self.arch.blocks() {
            if b == block {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.block_range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.block_range(block);
        &mut self.data[r]
    }

    /// Slice of `data` touched by the optimizer.
    pub fn trainable_range(&self) -> Range<usize> {
        if self.train_embeddings {
            0..self.data.len()
        } else {
            self.block_range(Block::PosEmbed).start..self.data.len()
        }
    }

    fn matrix(&self, block: Block, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), self.block(block)).expect("block shape")
    }

    fn embed_row(&self, k: usize) -> &[f64] {
        let d = self.arch.d_in;
        &self.block(Block::TokenEmbed)[k * d..(k + 1) * d]
    }

    fn check_example(&self, e: &Example) -> Result<()> {
        if e.x.len() != self.arch.dims {
            return Err(Error::DimensionMismatch(format!(
                "expected {} tokens, got {}",
                self.arch.dims,
                e.x.len()
            )));
        }
        if !(0.0..=1.0).contains(&e.t) {
            return Err(Error::InvalidArgument(format!("time {} outside [0, 1]", e.t)));
        }
        for &t in e.x.0.iter().chain(e.ctx.ego.iter()) {
            if t.index() >= self.arch.vocab {
                return Err(Error::InvalidToken {
                    id: t.index(),
                    size: self.arch.vocab,
                });
            }
        }
        Ok(())
    }

    fn write_input(&self, e: &Example, row: &mut [f64]) {
        let (d, dims) = (self.arch.d_in, self.arch.dims);
        let pos = self.block(Block::PosEmbed);
        for (i, tok) in e.x.0.iter().enumerate() {
            let dst = &mut row[i * d..(i + 1) * d];
            let emb = self.embed_row(tok.index());
            for j in 0..d {
                dst[j] = emb[j] + pos[i * d + j];
            }
        }
        let mut off = dims * d;
        row[off..off + COMMANDS].fill(0.0);
        row[off + e.ctx.command.index()] = 1.0;
        off += COMMANDS;
        for tok in e.ctx.ego {
            row[off..off + d].copy_from_slice(self.embed_row(tok.index()));
            off += d;
        }
        for (j, &w) in self.block(Block::TimeFreq).iter().enumerate() {
            row[off + 2 * j] = (w * e.t).sin();
            row[off + 2 * j + 1] = (w * e.t).cos();
        }
    }

    pub fn forward_batch(&self, batch: &[Example]) -> Result<ForwardCache> {
        let a = self.arch;
        let (iw, h, o) = (a.input_width(), a.hidden, a.outputs());
        let mut input = Array2::zeros((batch.len(), iw));
        for (b, e) in batch.iter().enumerate() {
            self.check_example(e)?;
            self.write_input(e, input.row_mut(b).into_slice().expect("row-major"));
        }
        let w1 = self.matrix(Block::W1, h, iw);
        let w2 = self.matrix(Block::W2, h, h);
        let wo = self.matrix(Block::Wo, o, h);
        let mut h1 = input.dot(&w1.t());
        add_bias_tanh(&mut h1, self.block(Block::B1));
        let mut h2 = h1.dot(&w2.t());
        add_bias_tanh(&mut h2, self.block(Block::B2));
        let mut logits = h2.dot(&wo.t());
        let bo = self.block(Block::Bo);
        for mut row in logits.rows_mut() {
            for (v, b) in row.iter_mut().zip(bo) {
                *v += b;
            }
        }
        Ok(ForwardCache {
            input,
            h1,
            h2,
            logits,
            tokens: batch.iter().map(|e| e.x.indices().collect()).collect(),
            ego: batch
                .iter()
                .map(|e| e.ctx.ego.map(|t| t.index()))
                .collect(),
            times: batch.iter().map(|e| e.t).collect(),
        })
    }

    /// Logits for one input, shaped `D x K`.
    pub fn forward(&self, x: &TrajectoryTokens, t: f64, ctx: &ContextEncoding) -> Result<Array2<f64>> {
        let cache = self.forward_batch(&[Example { x, t, ctx }])?;
        Ok(cache.example_logits(0, &self.arch).to_owned())
    }

    /// Posterior probabilities, one row of `K` per coordinate.
    pub fn posterior(&self, x: &TrajectoryTokens, t: f64, ctx: &ContextEncoding) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward(x, t, ctx)?;
        Ok(logits.rows().into_iter().map(|r| softmax(r.as_slice().unwrap())).collect())
    }

    /// Parameter gradient given `dL/dlogits` (`B x (D * K)`) for the batch in
    /// `cache`. Frozen token embeddings receive a zero gradient.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Vec<f64> {
        let a = self.arch;
        let (iw, h, o, d) = (a.input_width(), a.hidden, a.outputs(), a.d_in);
        let mut grad = vec![0.0; self.data.len()];

        let wo = self.matrix(Block::Wo, o, h);
        let w2 = self.matrix(Block::W2, h, h);
        let w1 = self.matrix(Block::W1, h, iw);

        let g_wo = dlogits.t().dot(&cache.h2);
        grad[self.block_range(Block::Wo)].copy_from_slice(g_wo.as_slice().unwrap());
        write_col_sums(&mut grad[self.block_range(Block::Bo)], dlogits);

        let mut da2 = dlogits.dot(&wo);
        tanh_backward(&mut da2, &cache.h2);
        let g_w2 = da2.t().dot(&cache.h1);
        grad[self.block_range(Block::W2)].copy_from_slice(g_w2.as_slice().unwrap());
        write_col_sums(&mut grad[self.block_range(Block::B2)], &da2);

        let mut da1 = da2.dot(&w2);
        tanh_backward(&mut da1, &cache.h1);
        let g_w1 = da1.t().dot(&cache.input);
        grad[self.block_range(Block::W1)].copy_from_slice(g_w1.as_slice().unwrap());
        write_col_sums(&mut grad[self.block_range(Block::B1)], &da1);

        let dx = da1.dot(&w1);
        let emb_r = self.block_range(Block::TokenEmbed);
        let pos_r = self.block_range(Block::PosEmbed);
        let time_r = self.block_range(Block::TimeFreq);
        let freqs = self.block(Block::TimeFreq);
        for b in 0..cache.batch() {
            let row = dx.row(b);
            let row = row.as_slice().unwrap();
            for (i, &tok) in cache.tokens[b].iter().enumerate() {
                let seg = &row[i * d..(i + 1) * d];
                for j in 0..d {
                    grad[pos_r.start + i * d + j] += seg[j];
                }
                if self.train_embeddings {
                    for j in 0..d {
                        grad[emb_r.start + tok * d + j] += seg[j];
                    }
                }
            }
            let mut off = a.dims * d + COMMANDS;
            for &tok in &cache.ego[b] {
                if self.train_embeddings {
                    for j in 0..d {
                        grad[emb_r.start + tok * d + j] += row[off + j];
                    }
                }
                off += d;
            }
            let t = cache.times[b];
            for (j, &w) in freqs.iter().enumerate() {
                grad[time_r.start + j] += t * (row[off + 2 * j] * (w * t).cos() - row[off + 2 * j + 1] * (w * t).sin());
            }
        }
        grad
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(NET_MAGIC)?;
        for v in [self.spec.min, self.spec.max, self.spec.resolution] {
            w.write_all(&v.to_le_bytes())?;
        }
        let a = self.arch;
        for v in [a.vocab, a.dims, a.d_in, a.hidden, self.train_embeddings as usize] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != NET_MAGIC {
            return Err("bad magic, not a network checkpoint".into());
        }
        let spec = CodebookSpec::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?).map_err(|e| e.to_string())?;
        let mut dims = [0usize; 5];
        for v in dims.iter_mut() {
            *v = read_u64(&mut r)? as usize;
        }
        let arch = Arch {
            vocab: dims[0],
            dims: dims[1],
            d_in: dims[2],
            hidden: dims[3],
        };
        arch.validate().map_err(|e| e.to_string())?;
        let n = read_u64(&mut r)? as usize;
        if n != arch.param_count() {
            return Err(format!("parameter count {n} does not match architecture ({})", arch.param_count()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = read_f64(&mut r)?;
            if !v.is_finite() {
                return Err("non-finite parameter".into());
            }
            data.push(v);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after parameters".into());
        }
        Ok(PolicyParams {
            arch,
            spec,
            train_embeddings: dims[4] != 0,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn add_bias_tanh(m: &mut Array2<f64>, bias: &[f64]) {
    for mut row in m.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = (*v + b).tanh();
        }
    }
}

fn tanh_backward(g: &mut Array2<f64>, act: &Array2<f64>) {
    g.zip_mut_with(act, |g, &a| *g *= 1.0 - a * a);
}

fn write_col_sums(dst: &mut [f64], m: &Array2<f64>) {
    let sums = m.sum_axis(NdAxis(0));
    dst.copy_from_slice(sums.as_slice().unwrap());
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `-Σ_i log softmax(logits_i)[x1_i]` for one `D x K` logit matrix.
pub fn ce_loss(logits: ArrayView2<f64>, x1: &TrajectoryTokens) -> Result<f64> {
    if logits.nrows() != x1.len() {
        return Err(Error::DimensionMismatch(format!("{} logit rows for {} targets", logits.nrows(), x1.len())));
    }
    let mut loss = 0.0;
    for (row, tok) in logits.rows().into_iter().zip(&x1.0) {
        let row = row.to_vec();
        if tok.index() >= row.len() {
            return Err(Error::InvalidToken {
                id: tok.index(),
                size: row.len(),
            });
        }
        loss -= log_softmax(&row)[tok.index()];
    }
    Ok(loss)
}

/// Batch-mean cross-entropy and its gradient with respect to the logits
/// (`(softmax - onehot) / B`).
pub fn ce_loss_batch(cache: &ForwardCache, arch: &Arch, targets: &[&TrajectoryTokens]) -> (f64, Array2<f64>) {
    let bsz = cache.batch();
    let mut grad = Array2::zeros(cache.logits.raw_dim());
    let mut loss = 0.0;
    for (b, target) in targets.iter().enumerate() {
        let row = cache.logits.row(b);
        let row = row.as_slice().unwrap();
        let mut g = grad.row_mut(b);
        let g = g.as_slice_mut().unwrap();
        for (i, tok) in target.0.iter().enumerate() {
            let span = i * arch.vocab..(i + 1) * arch.vocab;
            let lp = log_softmax(&row[span.clone()]);
            loss -= lp[tok.index()];
            for (dst, l) in g[span].iter_mut().zip(&lp) {
                *dst = l.exp() / bsz as f64;
            }
            g[i * arch.vocab + tok.index()] -= 1.0 / bsz as f64;
        }
    }
    (loss / bsz as f64, grad)
}

/// Central-difference check of `backward` on sampled coordinates. Returns
/// `(block, index, analytic, numeric, relative error)` per coordinate.
pub fn gradient_check(
    params: &PolicyParams,
    batch: &[Example],
    targets: &[&TrajectoryTokens],
    per_block: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<(Block, usize, f64, f64, f64)>> {
    use rand::Rng;
    let cache = params.forward_batch(batch)?;
    let (_, dlogits) = ce_loss_batch(&cache, &params.arch, targets);
    let grad = params.backward(&cache, &dlogits);
    let loss_at = |p: &PolicyParams| -> Result<f64> {
        let c = p.forward_batch(batch)?;
        Ok(ce_loss_batch(&c, &p.arch, targets).0)
    };
    let mut r = rng::stream(seed, &[0x6C]);
    let mut out = Vec::new();
    let mut probe = params.clone();
    for block in Block::ALL {
        if block == Block::TokenEmbed && !params.train_embeddings {
            continue;
        }
        let range = params.block_range(block);
        for _ in 0..per_block {
            let mut idx = r.gen_range(range.clone());
            if block == Block::TokenEmbed {
                // Rows that do not appear in the batch have a zero gradient;
                // pick a used token so the check is informative.
                let used: Vec<usize> = cache.tokens.iter().flatten().copied().collect();
                let tok = used[r.gen_range(0..used.len())];
                idx = range.start + tok * params.arch.d_in + r.gen_range(0..params.arch.d_in);
            }
            let orig = probe.data[idx];
            probe.data[idx] = orig + eps;
            let up = loss_at(&probe)?;
            probe.data[idx] = orig - eps;
            let down = loss_at(&probe)?;
            probe.data[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad[idx];
            let rel = relative_error(analytic, numeric);
            out.push((block, idx - range.start, analytic, numeric, rel));
        }
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)`, with an absolute floor so coordinates whose
/// true gradient is zero compare on absolute error instead.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolicyParams {
        let spec = CodebookSpec::new(0.0, 1.0, 0.25).unwrap();
        let arch = Arch {
            vocab: 5,
            dims: 4,
            d_in: 3,
            hidden: 6,
        };
        let table = EmbeddingTable::random(5, 3, 2);
        PolicyParams::init(arch, spec, &table, 9).unwrap()
    }

    fn ctx() -> ContextEncoding {
        ContextEncoding {
            command: Command::Left,
            ego: [TokenId(0), TokenId(1), TokenId(2), TokenId(3), TokenId(4)],
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = small();
        let x = TrajectoryTokens::from_indices([0, 1, 2, 3]);
        let a = p.forward(&x, 0.3, &ctx()).unwrap();
        assert_eq!(a.dim(), (4, 5));
        let b = p.forward(&x, 0.3, &ctx()).unwrap();
        assert_eq!(a, b);
        assert!(p.forward(&TrajectoryTokens::from_indices([0, 1]), 0.3, &ctx()).is_err());
        assert!(p.forward(&x, 1.3, &ctx()).is_err());
    }

    #[test]
    fn bidirectional_dependence() {
        let p = small();
        let x = TrajectoryTokens::from_indices([0, 1, 2, 3]);
        let y = TrajectoryTokens::from_indices([4, 1, 2, 3]);
        let a = p.forward(&x, 0.5, &ctx()).unwrap();
        let b = p.forward(&y, 0.5, &ctx()).unwrap();
        assert!((0..5).any(|k| a[[3, k]] != b[[3, k]]));
    }

    #[test]
    fn ce_examples() {
        let x1 = TrajectoryTokens::from_indices(vec![1; 16]);
        let mut logits = Array2::zeros((16, 4));
        let uniform = ce_loss(logits.view(), &x1).unwrap();
        assert!((uniform - 16.0 * 4f64.ln()).abs() < 1e-12);
        assert!((uniform - 22.1807).abs() < 1e-4);
        for i in 0..16 {
            logits[[i, 1]] = 30.0;
        }
        assert!(ce_loss(logits.view(), &x1).unwrap() < 1e-9);
        let shifted = logits.mapv(|v| v + 7.5);
        assert!((ce_loss(shifted.view(), &x1).unwrap() - ce_loss(logits.view(), &x1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        let p = small();
        let x = TrajectoryTokens::from_indices([0, 1, 2, 3]);
        let target = TrajectoryTokens::from_indices([4, 3, 2, 1]);
        let c = ctx();
        let cache = p.forward_batch(&[Example { x: &x, t: 0.2, ctx: &c }]).unwrap();
        let (_, g) = ce_loss_batch(&cache, &p.arch, &[&target]);
        let logits = cache.example_logits(0, &p.arch);
        for i in 0..4 {
            let sm = softmax(logits.row(i).as_slice().unwrap());
            for k in 0..5 {
                let onehot = if k == target.get(i).index() { 1.0 } else { 0.0 };
                assert!((g[[0, i * 5 + k]] - (sm[k] - onehot)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_network_bias_gradient() {
        let mut p = small();
        for b in [Block::W1, Block::W2, Block::Wo, Block::Bo] {
            p.block_mut(b).fill(0.0);
        }
        let bias: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        p.block_mut(Block::Bo).copy_from_slice(&bias);
        let c = ctx();
        let xs = [TrajectoryTokens::from_indices([0, 1, 2, 3]), TrajectoryTokens::from_indices([3, 3, 0, 1])];
        let ts = [TrajectoryTokens::from_indices([1, 1, 1, 1]), TrajectoryTokens::from_indices([0, 2, 4, 4])];
        let batch: Vec<Example> = xs.iter().map(|x| Example { x, t: 0.4, ctx: &c }).collect();
        let cache = p.forward_batch(&batch).unwrap();
        let (_, g) = ce_loss_batch(&cache, &p.arch, &[&ts[0], &ts[1]]);
        let grad = p.backward(&cache, &g);
        let gb = &grad[p.block_range(Block::Bo)];
        for i in 0..4 {
            let sm = softmax(&bias[i * 5..(i + 1) * 5]);
            for k in 0..5 {
                let hits = ts.iter().filter(|t| t.get(i).index() == k).count() as f64;
                let expect = sm[k] - hits / 2.0;
                assert!((gb[i * 5 + k] - expect).abs() < 1e-15);
            }
        }
        // Zero weights upstream leave nothing for the other blocks.
        assert!(grad[p.block_range(Block::W1)].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_all_blocks() {
        let mut p = small();
        p.train_embeddings = true;
        let c = ctx();
        let c2 = ContextEncoding {
            command: Command::Right,
            ego: [TokenId(4), TokenId(4), TokenId(0), TokenId(2), TokenId(1)],
        };
        let xs = [TrajectoryTokens::from_indices([0, 1, 2, 3]), TrajectoryTokens::from_indices([2, 2, 4, 0])];
        let ts = [TrajectoryTokens::from_indices([1, 0, 4, 4]), TrajectoryTokens::from_indices([3, 2, 1, 0])];
        let batch = [Example { x: &xs[0], t: 0.3, ctx: &c }, Example { x: &xs[1], t: 0.8, ctx: &c2 }];
        let rows = gradient_check(&p, &batch, &[&ts[0], &ts[1]], 12, 1e-5, 3).unwrap();
        assert_eq!(rows.len(), 12 * 9);
        for (b, i, a, n, rel) in rows {
            assert!(rel <= 1e-4, "{} {i}: {a} vs {n}", b.name());
        }
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let p = small();
        let x = TrajectoryTokens::from_indices([0, 1, 2, 3]);
        let c = ctx();
        let cache = p.forward_batch(&[Example { x: &x, t: 0.2, ctx: &c }]).unwrap();
        let (_, g) = ce_loss_batch(&cache, &p.arch, &[&x]);
        let grad = p.backward(&cache, &g);
        assert!(grad[p.block_range(Block::TokenEmbed)].iter().all(|&v| v == 0.0));
        assert_eq!(p.trainable_range().start, p.block_range(Block::PosEmbed).start);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let p = small();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = PolicyParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let x = TrajectoryTokens::from_indices([1, 1, 2, 3]);
        assert_eq!(p.forward(&x, 0.7, &ctx()).unwrap(), q.forward(&x, 0.7, &ctx()).unwrap());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(PolicyParams::read_from(bad.as_slice()).is_err());
        assert!(PolicyParams::read_from(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn posterior_rows_strictly_positive() {
        let p = small();
        let x = TrajectoryTokens::from_indices([0, 4, 2, 3]);
        for row in p.posterior(&x, 0.9, &ctx()).unwrap() {
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
