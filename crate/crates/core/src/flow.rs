//! Supervised training of the posterior denoiser with the flow-matching
//! cross-entropy, plus the deterministic toy task used to check it.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TrajectoryTokens;
use crate::error::{Error, Result};
use crate::net::{ce_loss_batch, ContextEncoding, Example, PolicyParams};
use crate::optim::{adamw_step, learning_rate, AdamWConfig, AdamWState, LrSchedule};
use crate::path::{corrupt, CoordinateSpace, GibbsSchedule};
use crate::rng;
use crate::sampler::{sample, SamplerConfig};
use crate::sim::{generate_scene, Difficulty, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowExample {
    pub ctx: ContextEncoding,
    pub target: TrajectoryTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "default_cosine")]
    pub schedule: LrSchedule,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_cosine() -> LrSchedule {
    LrSchedule::Cosine
}

fn default_wd() -> f64 {
    0.01
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            lr: 5e-6,
            steps: 50_000,
            batch: 64,
            seed: 0,
            warmup: 0,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            checkpoint_every: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("flow lr {} must be positive", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("flow steps and batch must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub ce: f64,
    pub grad_norm: f64,
}

/// Corrupted batch for one training step: example `b` draws its index and
/// time from substream `(seed, step, b)`.
fn training_batch(
    data: &[FlowExample],
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    cfg: &FlowTrainConfig,
    step: usize,
) -> Result<Vec<(usize, TrajectoryTokens, f64)>> {
    (0..cfg.batch)
        .map(|b| {
            let mut r = rng::stream(cfg.seed, &[0xF10, step as u64, b as u64]);
            let idx = r.gen_range(0..data.len());
            let t: f64 = r.gen();
            let x = corrupt(&data[idx].target, t, space, sched, r.gen())?;
            Ok((idx, x, t))
        })
        .collect()
}

/// Trains `params` in place. `on_checkpoint` is called every
/// `checkpoint_every` steps and after the final step.
pub fn train_flow<F>(
    data: &[FlowExample],
    mut params: PolicyParams,
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    cfg: &FlowTrainConfig,
    mut on_checkpoint: F,
) -> Result<(PolicyParams, Vec<LossReport>)>
where
    F: FnMut(usize, &PolicyParams) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let range = params.trainable_range();
    let mut state = AdamWState::zeros(range.len());
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = training_batch(data, space, sched, cfg, step)?;
        let examples: Vec<Example> = batch
            .iter()
            .map(|(i, x, t)| Example {
                x,
                t: *t,
                ctx: &data[*i].ctx,
            })
            .collect();
        let targets: Vec<&TrajectoryTokens> = batch.iter().map(|(i, _, _)| &data[*i].target).collect();
        let cache = params.forward_batch(&examples)?;
        let (ce, dlogits) = ce_loss_batch(&cache, &params.arch, &targets);
        if !ce.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("cross-entropy {ce}"),
            });
        }
        let grad = params.backward(&cache, &dlogits);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let lr = learning_rate(cfg.lr, cfg.schedule, cfg.warmup, step, cfg.steps);
        adamw_step(&mut params.data[range.clone()], &grad[range.clone()], &mut state, lr, &opt);
        trace.push(LossReport { step, ce, grad_norm });
        let last = step + 1 == cfg.steps;
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok((params, trace))
}

/// Mean cross-entropy over `count` corruptions at times drawn from
/// `[t_lo, t_hi)`.
pub fn mean_ce_at(
    params: &PolicyParams,
    data: &[FlowExample],
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    (t_lo, t_hi): (f64, f64),
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..count {
        let mut r = rng::stream(seed, &[0xCE, k as u64]);
        let ex = &data[r.gen_range(0..data.len())];
        let t = r.gen_range(t_lo..t_hi);
        let x = corrupt(&ex.target, t, space, sched, r.gen())?;
        let logits = params.forward(&x, t, &ex.ctx)?;
        total += crate::net::ce_loss(logits.view(), &ex.target)?;
    }
    Ok(total / count as f64)
}

pub fn examples_from_scenes(scenes: &[Scene], space: &CoordinateSpace) -> Result<Vec<FlowExample>> {
    let spec = space.axis(0).spec;
    scenes
        .iter()
        .map(|s| {
            Ok(FlowExample {
                ctx: s.context(&spec)?,
                target: s.expert_tokens(space)?,
            })
        })
        .collect()
}

/// `count` generated scenes with pairwise distinct contexts, so the context
/// determines the expert trajectory.
pub fn toy_scenes(count: usize, seed: u64, space: &CoordinateSpace) -> Result<Vec<Scene>> {
    let spec = space.axis(0).spec;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        let scene_seed = rng::derive_seed(seed, &[0x70F, k]);
        let scene = generate_scene(scene_seed, Difficulty::ALL[(k % 3) as usize]);
        k += 1;
        if seen.insert(scene.context(&spec)?) {
            out.push(scene);
        }
    }
    Ok(out)
}

/// Fraction of coordinates where a sampled sequence equals its target. Case
/// `j` samples with seed `(seed, j)`.
pub fn exact_match_rate(
    params: &PolicyParams,
    data: &[FlowExample],
    space: &CoordinateSpace,
    cfg: &SamplerConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (j, ex) in data.iter().enumerate() {
        let c = SamplerConfig {
            seed: rng::derive_seed(cfg.seed, &[j as u64]),
            ..*cfg
        };
        let (tokens, _) = sample(&ex.ctx, params, space, &c)?;
        hits += tokens.0.iter().zip(&ex.target.0).filter(|(a, b)| a == b).count();
        total += ex.target.len();
    }
    Ok(hits as f64 / total as f64)
}

pub fn write_loss_csv<W: Write>(trace: &[LossReport], config_hash: &str, w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "step,ce,grad_norm,config_hash")?;
    for r in trace {
        writeln!(w, "{},{},{},{config_hash}", r.step, r.ce, r.grad_norm)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookSpec;
    use crate::embedding::EmbeddingTable;
    use crate::net::Arch;

    fn tiny() -> (CoordinateSpace, PolicyParams, Vec<FlowExample>) {
        let spec = CodebookSpec::desk();
        let space = CoordinateSpace::trajectory(spec).unwrap();
        let arch = Arch {
            hidden: 16,
            d_in: 8,
            ..Arch::desk()
        };
        let table = EmbeddingTable::random(161, 8, 1);
        let params = PolicyParams::init(arch, spec, &table, 2).unwrap();
        let scenes = toy_scenes(4, 3, &space).unwrap();
        let data = examples_from_scenes(&scenes, &space).unwrap();
        (space, params, data)
    }

    #[test]
    fn toy_contexts_are_distinct() {
        let space = CoordinateSpace::trajectory(CodebookSpec::desk()).unwrap();
        let scenes = toy_scenes(64, 0, &space).unwrap();
        let data = examples_from_scenes(&scenes, &space).unwrap();
        let ctxs: HashSet<_> = data.iter().map(|d| d.ctx).collect();
        assert_eq!(ctxs.len(), 64);
    }

    #[test]
    fn same_seed_same_trace_and_checkpoints() {
        let (space, params, data) = tiny();
        let cfg = FlowTrainConfig {
            lr: 1e-3,
            steps: 6,
            batch: 4,
            checkpoint_every: 2,
            ..FlowTrainConfig::default()
        };
        let sched = GibbsSchedule::default();
        let mut seen = Vec::new();
        let (a, ta) = train_flow(&data, params.clone(), &space, &sched, &cfg, |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
        let (b, tb) = train_flow(&data, params, &space, &sched, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(ta.iter().all(|r| r.ce >= 0.0));
    }

    #[test]
    fn frozen_table_stays_put() {
        let (space, params, data) = tiny();
        let cfg = FlowTrainConfig {
            lr: 1e-2,
            steps: 3,
            batch: 2,
            ..FlowTrainConfig::default()
        };
        let (trained, _) = train_flow(&data, params.clone(), &space, &GibbsSchedule::default(), &cfg, |_, _| Ok(())).unwrap();
        let emb = params.block_range(crate::net::Block::TokenEmbed);
        assert_eq!(trained.data[emb.clone()], params.data[emb]);
        assert_ne!(trained.data, params.data);
    }

    #[test]
    fn config_validation() {
        assert!(FlowTrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(FlowTrainConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(FlowTrainConfig::default().validate().is_ok());
    }
}
