//! Group-relative policy optimization against the simulator reward.
//!
//! For each context, `G` trajectories are sampled under the current policy
//! and scored. Advantages are rewards minus the group mean. The per-token
//! likelihood of a sampled trajectory is the posterior probability of each of
//! its tokens given a corruption of the whole sequence at one time `t`, drawn
//! once per group and shared by its members.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::TrajectoryTokens;
use crate::error::{Error, Result};
use crate::net::{log_softmax, ContextEncoding, Example, ForwardCache, PolicyParams};
use crate::optim::{adamw_step, learning_rate, AdamWConfig, AdamWState, LrSchedule};
use crate::path::{corrupt, CoordinateSpace, GibbsSchedule};
use crate::rng;
use crate::sampler::{decode_waypoints, sample_batch, SamplerConfig};
use crate::sim::{score_waypoints, RewardWeights, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_strength: f64,
    pub lr: f64,
    pub iters: usize,
    /// Groups (contexts) per outer iteration.
    pub batch: usize,
    pub warmup: usize,
    #[serde(default)]
    pub weights: RewardWeights,
    /// Denoising steps used to sample candidate trajectories.
    pub sampler_steps: usize,
    #[serde(default = "default_constant")]
    pub schedule: LrSchedule,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub seed: u64,
}

fn default_constant() -> LrSchedule {
    LrSchedule::Constant
}

fn default_wd() -> f64 {
    0.01
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 3,
            clip_eps: 0.2,
            kl_strength: 0.02,
            lr: 1e-6,
            iters: 2000,
            batch: 32,
            warmup: 500,
            weights: RewardWeights::default(),
            sampler_steps: 10,
            schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size {} leaves the group baseline undefined; need at least 2",
                self.group_size
            )));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config("clip epsilon must be positive".into()));
        }
        if !(self.kl_strength >= 0.0) {
            return Err(Error::Config("KL strength must be nonnegative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("grpo lr must be positive".into()));
        }
        if self.iters == 0 || self.batch == 0 || self.sampler_steps == 0 {
            return Err(Error::Config("grpo iters, batch and sampler_steps must be positive".into()));
        }
        self.weights.validate()
    }

    /// Named ablation presets: group sizes `g2`, `g3`, `g4` and reward
    /// weightings `w5-20-2`, `w5-5-8`, `w20-5-2` (EP:TTC:C).
    pub fn preset(name: &str) -> Result<Self> {
        let base = GrpoConfig::default();
        let weights = |ep, ttc, comfort| RewardWeights { ep, ttc, comfort };
        Ok(match name {
            "g2" => GrpoConfig { group_size: 2, ..base },
            "g3" | "default" => base,
            "g4" => GrpoConfig { group_size: 4, ..base },
            "w5-20-2" => GrpoConfig { weights: weights(5.0, 20.0, 2.0), ..base },
            "w5-5-8" => GrpoConfig { weights: weights(5.0, 5.0, 8.0), ..base },
            "w20-5-2" => GrpoConfig { weights: weights(20.0, 5.0, 2.0), ..base },
            other => return Err(Error::Config(format!("unknown grpo preset '{other}'"))),
        })
    }

    pub const PRESETS: [&'static str; 6] = ["g2", "g3", "g4", "w5-20-2", "w5-5-8", "w20-5-2"];
}

/// `A_i = R_i - mean(R)`. The mean is corrected once so the outputs sum to
/// zero as closely as floating point allows.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument("advantages need a group of at least 2".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let residual = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= residual);
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub context: ContextEncoding,
    pub trajectories: Vec<TrajectoryTokens>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub corruption_time: f64,
    pub corrupted_inputs: Vec<TrajectoryTokens>,
}

impl GroupSample {
    /// Computes advantages and draws the group's shared corruption time and
    /// corrupted inputs from `seed`.
    pub fn new(
        context: ContextEncoding,
        trajectories: Vec<TrajectoryTokens>,
        rewards: Vec<f64>,
        space: &CoordinateSpace,
        sched: &GibbsSchedule,
        seed: u64,
    ) -> Result<Self> {
        let advantages = compute_advantages(&rewards)?;
        let mut r = rng::stream(seed, &[0x7C]);
        let t: f64 = r.gen();
        let corrupted_inputs = trajectories
            .iter()
            .enumerate()
            .map(|(i, x)| corrupt(x, t, space, sched, rng::derive_seed(seed, &[0x7D, i as u64])))
            .collect::<Result<_>>()?;
        Ok(GroupSample {
            context,
            trajectories,
            rewards,
            advantages,
            corruption_time: t,
            corrupted_inputs,
        })
    }
}

fn group_forward(params: &PolicyParams, groups: &[GroupSample]) -> Result<ForwardCache> {
    let examples: Vec<Example> = groups
        .iter()
        .flat_map(|g| {
            g.corrupted_inputs.iter().map(move |x| Example {
                x,
                t: g.corruption_time,
                ctx: &g.context,
            })
        })
        .collect();
    params.forward_batch(&examples)
}

/// Per-example, per-coordinate log-softmax rows.
fn log_probs(cache: &ForwardCache, params: &PolicyParams) -> Vec<Vec<Vec<f64>>> {
    (0..cache.batch())
        .map(|b| {
            cache
                .example_logits(b, &params.arch)
                .rows()
                .into_iter()
                .map(|r| log_softmax(r.as_slice().expect("contiguous")))
                .collect()
        })
        .collect()
}

/// `log p(o_i^k | corrupted input, context, t)` for every trajectory and
/// token of the group.
pub fn token_log_probs(params: &PolicyParams, group: &GroupSample) -> Result<Vec<Vec<f64>>> {
    let cache = group_forward(params, std::slice::from_ref(group))?;
    let lp = log_probs(&cache, params);
    Ok(group
        .trajectories
        .iter()
        .zip(&lp)
        .map(|(o, rows)| o.0.iter().zip(rows).map(|(tok, row)| row[tok.index()]).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Largest `|term| / |A|` over tokens with `A ≠ 0`.
    pub max_term_ratio: f64,
}

/// Negated clipped-surrogate objective with KL anchoring, averaged over
/// tokens, trajectories and groups, and its gradient with respect to `params`.
pub fn grpo_loss(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupSample],
    cfg: &GrpoConfig,
) -> Result<(LossStats, Vec<f64>)> {
    let cache = group_forward(params, groups)?;
    let lp = log_probs(&cache, params);
    let lp_old = log_probs(&group_forward(old, groups)?, old);
    let lp_ref = log_probs(&group_forward(reference, groups)?, reference);

    let (dims, vocab) = (params.arch.dims, params.arch.vocab);
    let mut dlogits = Array2::zeros(cache.logits.raw_dim());
    let mut stats = LossStats::default();
    let mut tokens = 0usize;
    let mut clipped = 0usize;
    let mut b = 0;
    for g in groups {
        let weight = 1.0 / (groups.len() * g.trajectories.len() * dims) as f64;
        for (o, &adv) in g.trajectories.iter().zip(&g.advantages) {
            let mut row = dlogits.row_mut(b);
            let row = row.as_slice_mut().expect("contiguous");
            for (k, tok) in o.0.iter().enumerate() {
                let (cur, prev, refr) = (&lp[b][k], &lp_old[b][k], &lp_ref[b][k]);
                let ratio = (cur[tok.index()] - prev[tok.index()]).exp();
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let (term, dterm) = if ratio * adv <= clipped_ratio * adv {
                    (ratio * adv, ratio * adv)
                } else {
                    (clipped_ratio * adv, 0.0)
                };
                if ratio != clipped_ratio {
                    clipped += 1;
                }
                if adv != 0.0 {
                    stats.max_term_ratio = stats.max_term_ratio.max(term.abs() / adv.abs());
                }
                let kl: f64 = cur.iter().zip(refr).map(|(p, q)| p.exp() * (p - q)).sum();
                stats.policy += weight * term;
                stats.mean_kl += kl;
                stats.loss -= weight * (term - cfg.kl_strength * kl);
                tokens += 1;

                let span = &mut row[k * vocab..(k + 1) * vocab];
                for v in 0..vocab {
                    let p = cur[v].exp();
                    let onehot = if v == tok.index() { 1.0 } else { 0.0 };
                    let d_term = dterm * (onehot - p);
                    let d_kl = p * (cur[v] - refr[v] - kl);
                    span[v] = -weight * (d_term - cfg.kl_strength * d_kl);
                }
            }
            b += 1;
        }
    }
    stats.mean_kl /= tokens.max(1) as f64;
    stats.clip_fraction = clipped as f64 / tokens.max(1) as f64;
    let grad = params.backward(&cache, &dlogits);
    Ok((stats, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrpoTraceRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

pub struct GrpoOutput {
    pub params: PolicyParams,
    pub trace: Vec<GrpoTraceRow>,
    /// Largest clipped-term ratio `|term| / |A|` seen during training.
    pub max_term_ratio: f64,
    /// Largest `|Σ A_i|` over all groups.
    pub max_advantage_sum: f64,
}

/// Samples `cfg.group_size` trajectories for each scene under `params`,
/// scores them, and returns one group per scene.
pub fn sample_groups(
    params: &PolicyParams,
    scenes: &[&Scene],
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<Vec<GroupSample>> {
    let spec = space.axis(0).spec;
    let mut jobs = Vec::with_capacity(scenes.len() * cfg.group_size);
    for (s, scene) in scenes.iter().enumerate() {
        let ctx = scene.context(&spec)?;
        for g in 0..cfg.group_size {
            jobs.push((ctx, rng::derive_seed(seed, &[s as u64, g as u64])));
        }
    }
    let sampler = SamplerConfig {
        steps: cfg.sampler_steps,
        schedule: *sched,
        seed,
        snap: true,
    };
    let trajectories = sample_batch(&jobs, params, space, &sampler)?;
    let mut groups = Vec::with_capacity(scenes.len());
    for (s, scene) in scenes.iter().enumerate() {
        let members: Vec<TrajectoryTokens> = trajectories[s * cfg.group_size..(s + 1) * cfg.group_size].to_vec();
        let rewards = members
            .iter()
            .map(|x| Ok(score_waypoints(scene, &decode_waypoints(x, space)?, &cfg.weights)?.reward))
            .collect::<Result<Vec<f64>>>()?;
        groups.push(GroupSample::new(
            jobs[s * cfg.group_size].0,
            members,
            rewards,
            space,
            sched,
            rng::derive_seed(seed, &[0x6E, s as u64]),
        )?);
    }
    Ok(groups)
}

/// Fine-tunes `sft` on `scenes`. The reference policy stays at `sft`; the
/// sampling policy is refreshed at the start of every outer iteration.
pub fn grpo_finetune(
    sft: &PolicyParams,
    scenes: &[Scene],
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    cfg: &GrpoConfig,
) -> Result<GrpoOutput> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let reference = sft.clone();
    let mut params = sft.clone();
    let range = params.trainable_range();
    let mut state = AdamWState::zeros(range.len());
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut max_term_ratio: f64 = 0.0;
    let mut max_advantage_sum: f64 = 0.0;
    for iter in 0..cfg.iters {
        let mut r = rng::stream(cfg.seed, &[0x6770, iter as u64]);
        let batch: Vec<&Scene> = (0..cfg.batch).map(|_| &scenes[r.gen_range(0..scenes.len())]).collect();
        let old = params.clone();
        let groups = sample_groups(&old, &batch, space, sched, cfg, rng::derive_seed(cfg.seed, &[iter as u64]))?;
        for g in &groups {
            max_advantage_sum = max_advantage_sum.max(g.advantages.iter().sum::<f64>().abs());
        }
        let (stats, grad) = grpo_loss(&params, &old, &reference, &groups, cfg)?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: iter,
                detail: format!("grpo loss {}", stats.loss),
            });
        }
        max_term_ratio = max_term_ratio.max(stats.max_term_ratio);
        let lr = learning_rate(cfg.lr, cfg.schedule, cfg.warmup, iter, cfg.iters);
        adamw_step(&mut params.data[range.clone()], &grad[range.clone()], &mut state, lr, &opt);
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        trace.push(GrpoTraceRow {
            iter,
            mean_reward: crate::stats::mean(&rewards),
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
        });
    }
    Ok(GrpoOutput {
        params,
        trace,
        max_term_ratio,
        max_advantage_sum,
    })
}

/// Mean per-token KL from `params` to `reference` over corruptions of the
/// reference policy's own samples.
pub fn mean_kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    scenes: &[Scene],
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<f64> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let groups = sample_groups(reference, &refs, space, sched, cfg, seed)?;
    let a = log_probs(&group_forward(params, &groups)?, params);
    let b = log_probs(&group_forward(reference, &groups)?, reference);
    let mut total = 0.0;
    let mut n = 0usize;
    for (ea, eb) in a.iter().zip(&b) {
        for (ra, rb) in ea.iter().zip(eb) {
            total += ra.iter().zip(rb).map(|(p, q)| p.exp() * (p - q)).sum::<f64>();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Mean reward of one sampled trajectory per scene; scene `j` uses seed
/// `(seed, j)` so two policies are compared on identical noise.
pub fn mean_reward(
    params: &PolicyParams,
    scenes: &[Scene],
    space: &CoordinateSpace,
    sampler: &SamplerConfig,
    weights: &RewardWeights,
) -> Result<f64> {
    let spec = space.axis(0).spec;
    let jobs = scenes
        .iter()
        .enumerate()
        .map(|(j, s)| Ok((s.context(&spec)?, rng::derive_seed(sampler.seed, &[j as u64]))))
        .collect::<Result<Vec<_>>>()?;
    let xs = sample_batch(&jobs, params, space, sampler)?;
    let mut total = 0.0;
    for (x, scene) in xs.iter().zip(scenes) {
        total += score_waypoints(scene, &decode_waypoints(x, space)?, weights)?.reward;
    }
    Ok(total / scenes.len() as f64)
}

pub fn write_trace_csv<W: Write>(trace: &[GrpoTraceRow], config_hash: &str, w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "iter,mean_reward,mean_kl,clip_fraction,config_hash")?;
    for r in trace {
        writeln!(w, "{},{},{},{},{config_hash}", r.iter, r.mean_reward, r.mean_kl, r.clip_fraction)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookSpec;
    use crate::embedding::EmbeddingTable;
    use crate::net::Arch;
    use crate::sim::{generate_scene, Difficulty};

    fn setup() -> (CoordinateSpace, PolicyParams, Vec<Scene>) {
        let spec = CodebookSpec::desk();
        let space = CoordinateSpace::trajectory(spec).unwrap();
        let arch = Arch {
            hidden: 12,
            d_in: 6,
            ..Arch::desk()
        };
        let table = EmbeddingTable::random(161, 6, 4);
        let params = PolicyParams::init(arch, spec, &table, 5).unwrap();
        let scenes = (0..4).map(|s| generate_scene(s, Difficulty::Medium)).collect();
        (space, params, scenes)
    }

    fn small_cfg() -> GrpoConfig {
        GrpoConfig {
            batch: 2,
            iters: 2,
            warmup: 0,
            sampler_steps: 2,
            lr: 1e-3,
            ..GrpoConfig::default()
        }
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[0.9, 0.6, 0.3]).unwrap();
        for (x, y) in a.iter().zip([0.3, 0.0, -0.3]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(compute_advantages(&[0.4; 3]).unwrap(), vec![0.0; 3]);
        assert!(compute_advantages(&[1.0]).is_err());
        let mut r = rng::stream(3, &[]);
        for _ in 0..1000 {
            let g = r.gen_range(2..6);
            let rewards: Vec<f64> = (0..g).map(|_| r.gen()).collect();
            let a = compute_advantages(&rewards).unwrap();
            assert!(a.iter().sum::<f64>().abs() < 1e-12);
            let scaled = compute_advantages(&rewards.iter().map(|x| 3.0 * x).collect::<Vec<_>>()).unwrap();
            for (x, y) in a.iter().zip(&scaled) {
                assert!((3.0 * x - y).abs() < 1e-12);
                assert_eq!(x.signum() == y.signum() || x.abs() < 1e-15, true);
            }
        }
    }

    #[test]
    fn group_size_one_rejected() {
        assert!(GrpoConfig { group_size: 1, ..GrpoConfig::default() }.validate().is_err());
        for name in GrpoConfig::PRESETS {
            GrpoConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(GrpoConfig::preset("nope").is_err());
    }

    #[test]
    fn identical_policies_give_unit_ratio_and_zero_terms() {
        let (space, params, scenes) = setup();
        let sched = GibbsSchedule::default();
        let cfg = GrpoConfig { kl_strength: 0.0, ..small_cfg() };
        let refs: Vec<&Scene> = scenes.iter().collect();
        let groups = sample_groups(&params, &refs, &space, &sched, &cfg, 1).unwrap();
        let lp = token_log_probs(&params, &groups[0]).unwrap();
        assert!(lp.iter().flatten().all(|v| v.is_finite() && *v < 0.0));
        let (stats, _) = grpo_loss(&params, &params, &params, &groups, &cfg).unwrap();
        assert!(stats.policy.abs() < 1e-12, "{}", stats.policy);
        assert_eq!(stats.mean_kl, 0.0);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn equal_rewards_zero_gradient() {
        let (space, params, scenes) = setup();
        let sched = GibbsSchedule::default();
        let cfg = GrpoConfig { kl_strength: 0.0, ..small_cfg() };
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut groups = sample_groups(&params, &refs, &space, &sched, &cfg, 2).unwrap();
        for g in &mut groups {
            g.rewards = vec![0.5; g.rewards.len()];
            g.advantages = compute_advantages(&g.rewards).unwrap();
        }
        let mut other = params.clone();
        other.data.iter_mut().for_each(|v| *v *= 1.01);
        let (_, grad) = grpo_loss(&other, &params, &params, &groups, &cfg).unwrap();
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (space, params, scenes) = setup();
        let sched = GibbsSchedule::default();
        let cfg = GrpoConfig { kl_strength: 0.5, clip_eps: 0.2, ..small_cfg() };
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut groups = sample_groups(&params, &refs[..2], &space, &sched, &cfg, 3).unwrap();
        // Make the advantages nonzero regardless of the sampled rewards.
        for g in &mut groups {
            g.rewards = (0..g.rewards.len()).map(|i| i as f64 * 0.3).collect();
            g.advantages = compute_advantages(&g.rewards).unwrap();
        }
        let mut cur = params.clone();
        let mut r = rng::stream(9, &[]);
        for v in cur.data.iter_mut() {
            *v += 0.01 * rng::normal(&mut r);
        }
        let mut reference = params.clone();
        for v in reference.data.iter_mut() {
            *v -= 0.01 * rng::normal(&mut r);
        }
        let (_, grad) = grpo_loss(&cur, &params, &reference, &groups, &cfg).unwrap();
        let range = cur.trainable_range();
        for _ in 0..40 {
            let idx = r.gen_range(range.clone());
            let mut probe = cur.clone();
            probe.data[idx] += 1e-5;
            let up = grpo_loss(&probe, &params, &reference, &groups, &cfg).unwrap().0.loss;
            probe.data[idx] -= 2e-5;
            let down = grpo_loss(&probe, &params, &reference, &groups, &cfg).unwrap().0.loss;
            let numeric = (up - down) / 2e-5;
            let rel = crate::net::relative_error(grad[idx], numeric);
            assert!(rel < 1e-4 || (grad[idx] - numeric).abs() < 1e-9, "{idx}: {} vs {numeric}", grad[idx]);
        }
    }

    #[test]
    fn clip_arithmetic() {
        // r = 1.5, ε = 0.2, A = 1 → min(1.5, 1.2) = 1.2.
        let (r, eps, a): (f64, f64, f64) = (1.5, 0.2, 1.0);
        let term = (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
        assert_eq!(term, 1.2);
    }

    #[test]
    fn finetune_is_deterministic_and_bounded() {
        let (space, params, scenes) = setup();
        let sched = GibbsSchedule::default();
        let cfg = small_cfg();
        let a = grpo_finetune(&params, &scenes, &space, &sched, &cfg).unwrap();
        let b = grpo_finetune(&params, &scenes, &space, &sched, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.iter().all(|r| (0.0..=1.0).contains(&r.mean_reward)));
        assert!(a.max_term_ratio <= 1.0 + cfg.clip_eps + 1e-12);
        assert!(a.max_advantage_sum < 1e-12);
    }
}
