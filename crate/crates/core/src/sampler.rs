//! Parallel Euler jump sampling over the token sequence.
//!
//! Each step visits every coordinate independently: draw a target from the
//! posterior row, compute the exit rate towards it, jump with probability
//! `1 - exp(-h λ)`, and on a jump pick the new token in proportion to the
//! off-diagonal rates. The rate is integrated over the step
//! (`h λ ≈ Δβ · Σ_x p_t(x) [d(z) - d(x)]₊` with `Δβ = β(t + h) - β(t)`), which
//! stays finite at `t = 0` where `β̇` is unbounded.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{TokenId, TrajectoryTokens};
use crate::ctmc::transition_weights;
use crate::error::{Error, Result};
use crate::net::{softmax, ContextEncoding, Example, PolicyParams};
use crate::path::{CoordinateSpace, GibbsSchedule};
use crate::rng;

/// Posterior used for one denoising step.
pub enum PosteriorRows<'a> {
    /// One probability row of length `K` per coordinate.
    Probs(&'a [Vec<f64>]),
    /// Point mass on a known clean sequence.
    Oracle(&'a TrajectoryTokens),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: GibbsSchedule,
    pub seed: u64,
    /// Replace each coordinate with the posterior argmax after the last step.
    #[serde(default = "default_snap")]
    pub snap: bool,
}

fn default_snap() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        SamplerConfig {
            steps,
            schedule: GibbsSchedule::default(),
            seed,
            snap: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

pub fn jump_probability(h: f64, lambda: f64) -> f64 {
    1.0 - (-h * lambda).exp()
}

/// `x_0`: every coordinate uniform over its alphabet.
pub fn uniform_start(space: &CoordinateSpace, seed: u64) -> TrajectoryTokens {
    TrajectoryTokens(
        (0..space.dims())
            .map(|i| {
                let mut r = rng::stream(seed, &[0x57A7, i as u64]);
                TokenId::from_index(r.gen_range(0..space.axis(i).size()))
            })
            .collect(),
    )
}

/// One Euler step from `t` to `t + h`. Coordinate `i` at step `step` draws
/// from the substream `(seed, step, i)`, so results do not depend on the
/// order coordinates are visited in.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    x: &TrajectoryTokens,
    t: f64,
    h: f64,
    posterior: &PosteriorRows,
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    seed: u64,
    step: usize,
) -> TrajectoryTokens {
    let beta = sched.beta(t);
    let dbeta = sched.increment(t, h);
    let mut buf = (Vec::new(), Vec::new());
    let out = (0..x.len())
        .map(|i| step_coordinate(i, x.get(i), posterior, space, beta, dbeta, seed, step, &mut buf))
        .collect();
    TrajectoryTokens(out)
}

#[allow(clippy::too_many_arguments)]
fn step_coordinate(
    i: usize,
    z: TokenId,
    posterior: &PosteriorRows,
    space: &CoordinateSpace,
    beta: f64,
    dbeta: f64,
    seed: u64,
    step: usize,
    (probs, weights): &mut (Vec<f64>, Vec<f64>),
) -> TokenId {
    let mut r = rng::stream(seed, &[0x57E9, step as u64, i as u64]);
    let target = match posterior {
        PosteriorRows::Oracle(x1) => x1.get(i),
        PosteriorRows::Probs(rows) => TokenId::from_index(rng::sample_weighted(&mut r, &rows[i], 1.0)),
    };
    let total = transition_weights(space.axis(i), z.index(), target.index(), beta, probs, weights);
    let u: f64 = r.gen();
    if total > 0.0 && u < jump_probability(dbeta, total) {
        TokenId::from_index(rng::sample_weighted(&mut r, weights, total))
    } else {
        z
    }
}

/// 16 tokens decoded as 8 `(x, y)` waypoints, stored interleaved.
pub fn decode_waypoints(tokens: &TrajectoryTokens, space: &CoordinateSpace) -> Result<Vec<[f64; 2]>> {
    space.check(tokens)?;
    let vals: Vec<f64> = tokens
        .0
        .iter()
        .enumerate()
        .map(|(i, &t)| space.axis(i).spec.dequantize(t))
        .collect::<Result<_>>()?;
    Ok(vals.chunks(2).map(|c| [c[0], c[1]]).collect())
}

pub fn encode_waypoints(waypoints: &[[f64; 2]], space: &CoordinateSpace) -> Result<TrajectoryTokens> {
    if waypoints.len() * 2 != space.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{} waypoints for {} coordinates",
            waypoints.len(),
            space.dims()
        )));
    }
    let toks = waypoints
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, &v)| space.axis(i).spec.quantize(v, false))
        .collect::<Result<_>>()?;
    Ok(TrajectoryTokens(toks))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Full sampling run from a uniform start over the grid `t_k = k / n`.
pub fn sample(
    ctx: &ContextEncoding,
    params: &PolicyParams,
    space: &CoordinateSpace,
    cfg: &SamplerConfig,
) -> Result<(TrajectoryTokens, Vec<[f64; 2]>)> {
    let x = sample_batch(&[(*ctx, cfg.seed)], params, space, cfg)?.remove(0);
    let wps = decode_waypoints(&x, space)?;
    Ok((x, wps))
}

/// Samples several `(context, seed)` jobs at once, sharing each network
/// evaluation across the batch. `cfg.seed` is ignored in favour of the
/// per-job seeds.
pub fn sample_batch(
    jobs: &[(ContextEncoding, u64)],
    params: &PolicyParams,
    space: &CoordinateSpace,
    cfg: &SamplerConfig,
) -> Result<Vec<TrajectoryTokens>> {
    cfg.validate()?;
    let h = 1.0 / cfg.steps as f64;
    let mut xs: Vec<TrajectoryTokens> = jobs.iter().map(|(_, seed)| uniform_start(space, *seed)).collect();
    for step in 0..cfg.steps {
        let t = step as f64 * h;
        let rows = batch_posterior(params, &xs, t, jobs)?;
        for ((x, rows), (_, seed)) in xs.iter_mut().zip(&rows).zip(jobs) {
            *x = denoise_step(x, t, h, &PosteriorRows::Probs(rows), space, &cfg.schedule, *seed, step);
        }
    }
    if cfg.snap {
        let rows = batch_posterior(params, &xs, cfg.schedule.t_max, jobs)?;
        for (x, rows) in xs.iter_mut().zip(&rows) {
            *x = TrajectoryTokens(rows.iter().map(|r| TokenId::from_index(argmax(r))).collect());
        }
    }
    Ok(xs)
}

fn batch_posterior(
    params: &PolicyParams,
    xs: &[TrajectoryTokens],
    t: f64,
    jobs: &[(ContextEncoding, u64)],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let examples: Vec<Example> = xs
        .iter()
        .zip(jobs)
        .map(|(x, (ctx, _))| Example { x, t, ctx })
        .collect();
    let cache = params.forward_batch(&examples)?;
    Ok((0..xs.len())
        .map(|b| {
            cache
                .example_logits(b, &params.arch)
                .rows()
                .into_iter()
                .map(|r| softmax(r.as_slice().expect("contiguous")))
                .collect()
        })
        .collect())
}

/// Oracle-posterior counterpart of [`sample`].
pub fn sample_oracle(x1: &TrajectoryTokens, space: &CoordinateSpace, cfg: &SamplerConfig) -> Result<TrajectoryTokens> {
    cfg.validate()?;
    space.check(x1)?;
    let h = 1.0 / cfg.steps as f64;
    let mut x = uniform_start(space, cfg.seed);
    for step in 0..cfg.steps {
        x = denoise_step(&x, step as f64 * h, h, &PosteriorRows::Oracle(x1), space, &cfg.schedule, cfg.seed, step);
    }
    if cfg.snap {
        x = x1.clone();
    }
    Ok(x)
}

/// Mean Euclidean distance between matching waypoints.
pub fn waypoint_l2(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: u64,
    pub n_steps: usize,
    pub tokens: Vec<u32>,
    pub waypoints: Vec<[f64; 2]>,
    pub seed: u64,
}

/// One evaluation input: context plus the expert waypoints it should recover.
pub struct EvalCase<'a> {
    pub scene_id: u64,
    pub ctx: ContextEncoding,
    pub expert: &'a [[f64; 2]],
}

#[derive(Debug, Clone, Serialize)]
pub struct CoarseToFineRow {
    pub n_steps: usize,
    pub mean_l2: f64,
    pub mean_reward: f64,
    /// Total sampling wall time over the dataset, seconds.
    pub wall_time: f64,
}

pub struct CoarseToFine {
    pub rows: Vec<CoarseToFineRow>,
    /// Per-step-count, per-case L2 errors, in dataset order.
    pub errors: Vec<Vec<f64>>,
    pub records: Vec<SampleRecord>,
    pub rewards: Vec<Vec<f64>>,
}

/// Samples every case at each step count and aggregates waypoint error and
/// the reward returned by `reward(case index, waypoints)`. Case `j` uses seed
/// `(seed, scene_id)` at every `n`, so step counts see the same noise.
pub fn coarse_to_fine_eval<F>(
    cases: &[EvalCase],
    params: &PolicyParams,
    space: &CoordinateSpace,
    steps_list: &[usize],
    base: &SamplerConfig,
    mut reward: F,
) -> Result<CoarseToFine>
where
    F: FnMut(usize, &[[f64; 2]]) -> Result<f64>,
{
    if steps_list.is_empty() || steps_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("steps list must be non-empty and strictly increasing".into()));
    }
    let mut out = CoarseToFine {
        rows: Vec::new(),
        errors: Vec::new(),
        records: Vec::new(),
        rewards: Vec::new(),
    };
    for &n in steps_list {
        let mut errs = Vec::with_capacity(cases.len());
        let mut rews = Vec::with_capacity(cases.len());
        let mut elapsed = 0.0;
        for (j, case) in cases.iter().enumerate() {
            let cfg = SamplerConfig {
                steps: n,
                seed: rng::derive_seed(base.seed, &[case.scene_id]),
                ..*base
            };
            let start = Instant::now();
            let (tokens, wps) = sample(&case.ctx, params, space, &cfg)?;
            elapsed += start.elapsed().as_secs_f64();
            errs.push(waypoint_l2(&wps, case.expert));
            rews.push(reward(j, &wps)?);
            out.records.push(SampleRecord {
                scene_id: case.scene_id,
                n_steps: n,
                tokens: tokens.0.iter().map(|t| t.0).collect(),
                waypoints: wps,
                seed: cfg.seed,
            });
        }
        out.rows.push(CoarseToFineRow {
            n_steps: n,
            mean_l2: crate::stats::mean(&errs),
            mean_reward: crate::stats::mean(&rews),
            wall_time: elapsed,
        });
        out.errors.push(errs);
        out.rewards.push(rews);
    }
    Ok(out)
}

pub fn write_coarse_to_fine_csv<W: Write>(rows: &[CoarseToFineRow], config_hash: &str, w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "n_steps,mean_l2,mean_reward,wall_time,config_hash")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.n_steps, r.mean_l2, r.mean_reward, r.wall_time, config_hash)?;
    }
    w.flush()
}
