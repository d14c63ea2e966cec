//! Stage orchestration behind the command-line tool. Every stage reads and
//! writes under the run's output directory.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookSpec;
use crate::config::RunConfig;
use crate::embedding::{all_pairs_spearman, train_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::flow::{examples_from_scenes, train_flow, write_loss_csv};
use crate::grpo::{grpo_finetune, mean_reward, write_trace_csv};
use crate::net::PolicyParams;
use crate::oracle::{self, OracleReport};
use crate::path::CoordinateSpace;
use crate::rng;
use crate::sampler::{coarse_to_fine_eval, sample_batch, decode_waypoints, EvalCase, SampleRecord};
use crate::sim::{generate_scene, load_scenes, save_scenes, score_waypoints, Difficulty, RewardBreakdown, Scene};
use crate::stats::mean;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// File locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.json")
    }

    pub fn embed(&self) -> PathBuf {
        self.root.join("embed.wamfemb")
    }

    pub fn flow(&self) -> PathBuf {
        self.root.join("flow.wamfnet")
    }

    pub fn flow_step(&self, step: usize) -> PathBuf {
        self.root.join(format!("flow_step{step}.wamfnet"))
    }

    pub fn grpo(&self) -> PathBuf {
        self.root.join("grpo.wamfnet")
    }

    pub fn trace(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_trace.csv"))
    }

    pub fn eval_metrics(&self) -> PathBuf {
        self.root.join("eval").join("metrics.csv")
    }

    pub fn eval_scenes(&self) -> PathBuf {
        self.root.join("eval").join("scenes.jsonl")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.jsonl")
    }

    pub fn oracle(&self, suite: &str) -> PathBuf {
        self.root.join(format!("oracle_{suite}.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::StageOrder(format!("{what} not found at {}; {hint}", path.display())))
    }
}

fn space(cfg: &RunConfig) -> Result<CoordinateSpace> {
    CoordinateSpace::trajectory(cfg.codebook)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub mix: [f64; 3],
    pub splits: Vec<SplitInfo>,
    pub config_hash: String,
}

/// Scenes for each split. Scene `k` of split `s` has seed `(seed, s, k)`;
/// a seed already used by an earlier scene is skipped so ids stay disjoint.
pub fn generate_splits(cfg: &RunConfig) -> Vec<Vec<Scene>> {
    let d = &cfg.data;
    let total: f64 = d.mix.iter().sum();
    let mut used = HashSet::new();
    let mut out = Vec::new();
    for (s, count) in [d.train, d.val, d.test].into_iter().enumerate() {
        let mut scenes = Vec::with_capacity(count);
        let mut k = 0u64;
        while scenes.len() < count {
            let seed = rng::derive_seed(d.seed, &[s as u64, k]);
            k += 1;
            if !used.insert(seed) {
                continue;
            }
            let mut r = rng::stream(seed, &[0xD1F]);
            let difficulty = Difficulty::ALL[rng::sample_weighted(&mut r, &d.mix, total)];
            scenes.push(generate_scene(seed, difficulty));
        }
        out.push(scenes);
    }
    out
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.out_dir);
    let splits = generate_splits(cfg);
    let mut infos = Vec::new();
    for (name, scenes) in SPLITS.iter().zip(&splits) {
        let path = layout.split(name);
        create(&path)?;
        save_scenes(scenes, &path)?;
        infos.push(SplitInfo {
            name: name.to_string(),
            file: format!("{name}.jsonl"),
            count: scenes.len(),
        });
    }
    let manifest = Manifest {
        seed: cfg.data.seed,
        mix: cfg.data.mix,
        splits: infos,
        config_hash: cfg.hash(),
    };
    write_with(&layout.manifest(), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        w.write_all(b"\n")
    })?;
    Ok(manifest)
}

fn load_split(layout: &Layout, name: &str) -> Result<Vec<Scene>> {
    let path = layout.split(name);
    require(&path, &format!("{name} split"), "run gen-data first")?;
    load_scenes(&path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmbedSummary {
    pub spearman: f64,
    pub final_loss: f64,
}

pub fn cmd_train_embed(cfg: &RunConfig) -> Result<EmbedSummary> {
    let layout = Layout::new(&cfg.out_dir);
    let out = train_embeddings(&cfg.codebook, &cfg.embed)?;
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    out.table.save(&cfg.codebook, &layout.embed())?;
    let hash = cfg.hash();
    write_with(&layout.trace("embed"), |w| {
        writeln!(w, "step,loss,config_hash")?;
        for (i, l) in out.loss_trace.iter().enumerate() {
            writeln!(w, "{i},{l},{hash}")?;
        }
        Ok(())
    })?;
    Ok(EmbedSummary {
        spearman: all_pairs_spearman(&cfg.codebook, &out.table),
        final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
    })
}

fn load_embedding(cfg: &RunConfig, layout: &Layout) -> Result<EmbeddingTable> {
    let path = layout.embed();
    require(&path, "embedding checkpoint", "run `train embed` first")?;
    let (spec, table) = EmbeddingTable::load(&path)?;
    check_spec(&path, &spec, &cfg.codebook)?;
    if table.dim() != cfg.embed.dim {
        return Err(Error::Checkpoint {
            path,
            reason: format!("embedding dim {} but config says {}", table.dim(), cfg.embed.dim),
        });
    }
    Ok(table)
}

fn check_spec(path: &Path, found: &CodebookSpec, want: &CodebookSpec) -> Result<()> {
    if found != want {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("codebook {found:?} differs from config {want:?}"),
        });
    }
    Ok(())
}

fn load_policy(cfg: &RunConfig, path: &Path) -> Result<PolicyParams> {
    let params = PolicyParams::load(path)?;
    check_spec(path, &params.spec, &cfg.codebook)?;
    if params.arch != cfg.arch() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("architecture {:?} differs from config {:?}", params.arch, cfg.arch()),
        });
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowSummary {
    pub steps: usize,
    pub final_ce: f64,
}

pub fn cmd_train_flow(cfg: &RunConfig) -> Result<FlowSummary> {
    let layout = Layout::new(&cfg.out_dir);
    let table = load_embedding(cfg, &layout)?;
    let scenes = load_split(&layout, "train")?;
    let space = space(cfg)?;
    let data = examples_from_scenes(&scenes, &space)?;
    let mut params = PolicyParams::init(cfg.arch(), cfg.codebook, &table, cfg.model.init_seed)?;
    params.train_embeddings = cfg.model.train_embeddings;
    let (params, trace) = train_flow(&data, params, &space, &cfg.schedule, &cfg.flow, |step, p| {
        if step < cfg.flow.steps {
            p.save(&layout.flow_step(step))?;
        }
        Ok(())
    })?;
    params.save(&layout.flow())?;
    let hash = cfg.hash();
    write_with(&layout.trace("flow"), |w| write_loss_csv(&trace, &hash, w))?;
    let tail = &trace[trace.len().saturating_sub(100)..];
    Ok(FlowSummary {
        steps: trace.len(),
        final_ce: mean(&tail.iter().map(|r| r.ce).collect::<Vec<_>>()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrpoSummary {
    pub val_reward_before: f64,
    pub val_reward_after: f64,
    pub max_term_ratio: f64,
    pub max_advantage_sum: f64,
}

pub fn cmd_train_grpo(cfg: &RunConfig) -> Result<GrpoSummary> {
    let layout = Layout::new(&cfg.out_dir);
    let flow = layout.flow();
    require(&flow, "flow checkpoint", "run `train flow` first")?;
    let sft = load_policy(cfg, &flow)?;
    let scenes = load_split(&layout, "train")?;
    let val = load_split(&layout, "val")?;
    let space = space(cfg)?;
    let out = grpo_finetune(&sft, &scenes, &space, &cfg.schedule, &cfg.grpo)?;
    out.params.save(&layout.grpo())?;
    let hash = cfg.hash();
    write_with(&layout.trace("grpo"), |w| write_trace_csv(&out.trace, &hash, w))?;
    let sampler = crate::sampler::SamplerConfig {
        snap: true,
        ..cfg.sampler(cfg.grpo.sampler_steps)
    };
    let (before, after) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            mean_reward(&sft, &val, &space, &sampler, &cfg.grpo.weights)?,
            mean_reward(&out.params, &val, &space, &sampler, &cfg.grpo.weights)?,
        )
    };
    Ok(GrpoSummary {
        val_reward_before: before,
        val_reward_after: after,
        max_term_ratio: out.max_term_ratio,
        max_advantage_sum: out.max_advantage_sum,
    })
}

/// The given checkpoint, else the latest trained policy.
fn resolve_checkpoint(layout: &Layout, checkpoint: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = checkpoint {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
        return Ok(p.to_path_buf());
    }
    [layout.grpo(), layout.flow()]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::StageOrder("no policy checkpoint; run `train flow` first".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub n_steps: usize,
    pub mean_reward: f64,
    pub mean_pdms: f64,
    pub mean_l2: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalRecord<'a> {
    #[serde(flatten)]
    sample: &'a SampleRecord,
    l2: f64,
    #[serde(flatten)]
    score: RewardBreakdown,
    config_hash: &'a str,
}

/// Coarse-to-fine evaluation of a checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<EvalRow>> {
    let layout = Layout::new(&cfg.out_dir);
    let path = resolve_checkpoint(&layout, checkpoint)?;
    let params = load_policy(cfg, &path)?;
    let scenes = load_split(&layout, "test")?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let space = space(cfg)?;
    let cases = scenes
        .iter()
        .map(|s| {
            Ok(EvalCase {
                scene_id: s.id,
                ctx: s.context(&cfg.codebook)?,
                expert: &s.expert,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = cfg.grpo.weights;
    let mut scores = Vec::new();
    let base = cfg.sampler(cfg.eval.steps_list[0]);
    let result = coarse_to_fine_eval(&cases, &params, &space, &cfg.eval.steps_list, &base, |j, wps| {
        let b = score_waypoints(&scenes[j], wps, &weights)?;
        scores.push(b);
        Ok(b.reward)
    })?;
    let hash = cfg.hash();
    let per_n = scenes.len();
    let rows: Vec<EvalRow> = result
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| EvalRow {
            n_steps: r.n_steps,
            mean_reward: r.mean_reward,
            mean_pdms: mean(&scores[i * per_n..(i + 1) * per_n].iter().map(|b| b.pdms).collect::<Vec<_>>()),
            mean_l2: r.mean_l2,
            wall_time: r.wall_time,
        })
        .collect();
    write_with(&layout.eval_metrics(), |w| {
        writeln!(w, "n_steps,mean_reward,mean_pdms,mean_l2,wall_time,config_hash")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{},{hash}", r.n_steps, r.mean_reward, r.mean_pdms, r.mean_l2, r.wall_time)?;
        }
        Ok(())
    })?;
    write_with(&layout.eval_scenes(), |w| {
        for (k, rec) in result.records.iter().enumerate() {
            let line = EvalRecord {
                sample: rec,
                l2: result.errors[k / per_n][k % per_n],
                score: scores[k],
                config_hash: &hash,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct SampleLine<'a> {
    #[serde(flatten)]
    sample: SampleRecord,
    config_hash: &'a str,
}

/// One trajectory per test scene at `steps` denoising steps; scene `j` uses
/// seed `(eval.seed, scene id)`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, steps: usize) -> Result<Vec<SampleRecord>> {
    let layout = Layout::new(&cfg.out_dir);
    let path = resolve_checkpoint(&layout, checkpoint)?;
    let params = load_policy(cfg, &path)?;
    let scenes = load_split(&layout, "test")?;
    let space = space(cfg)?;
    let sampler = cfg.sampler(steps);
    let jobs = scenes
        .iter()
        .map(|s| Ok((s.context(&cfg.codebook)?, rng::derive_seed(sampler.seed, &[s.id]))))
        .collect::<Result<Vec<_>>>()?;
    let xs = sample_batch(&jobs, &params, &space, &sampler)?;
    let records = xs
        .iter()
        .zip(&scenes)
        .zip(&jobs)
        .map(|((x, s), (_, seed))| {
            Ok(SampleRecord {
                scene_id: s.id,
                n_steps: steps,
                tokens: x.0.iter().map(|t| t.0).collect(),
                waypoints: decode_waypoints(x, &space)?,
                seed: *seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hash = cfg.hash();
    write_with(&layout.samples(), |w| {
        for r in &records {
            serde_json::to_writer(
                &mut *w,
                &SampleLine {
                    sample: r.clone(),
                    config_hash: &hash,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(records)
}

pub const ORACLE_SUITES: [&str; 5] = ["path", "rates", "ctmc", "gradcheck", "reward"];

pub fn cmd_oracle(cfg: &RunConfig, suite: &str, seed: u64) -> Result<OracleReport> {
    let report = match suite {
        "path" => oracle::path_boundaries(cfg.codebook, &cfg.schedule)?,
        "rates" => oracle::rate_validity(cfg.codebook, &cfg.schedule, 10_000, seed)?,
        "ctmc" => oracle::ctmc_suite(&cfg.schedule, 100_000, seed)?,
        "gradcheck" => oracle::gradcheck_suite(seed)?,
        "reward" => oracle::reward_suite(seed)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown oracle suite '{other}' (expected one of {ORACLE_SUITES:?})"
            )))
        }
    };
    let layout = Layout::new(&cfg.out_dir);
    let hash = cfg.hash();
    write_with(&layout.oracle(suite), |w| report.write_csv(&hash, w))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub artifact: String,
    pub present: bool,
    pub metric: String,
    pub value: f64,
}

fn last_csv_value(path: &Path, column: &str) -> Option<f64> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let idx = lines.next()?.split(',').position(|c| c == column)?;
    lines.last()?.split(',').nth(idx)?.parse().ok()
}

/// Collects the headline number of every stage found in the output
/// directory into `report.csv`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let layout = Layout::new(&cfg.out_dir);
    let mut rows = Vec::new();
    let mut push = |artifact: &Path, metric: &str, value: Option<f64>| {
        rows.push(ReportRow {
            artifact: artifact.strip_prefix(&layout.root).unwrap_or(artifact).display().to_string(),
            present: artifact.exists(),
            metric: metric.into(),
            value: value.unwrap_or(f64::NAN),
        });
    };
    let manifest: Option<Manifest> = std::fs::read_to_string(layout.manifest())
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let scenes = manifest.map(|m| m.splits.iter().map(|s| s.count).sum::<usize>() as f64);
    push(&layout.manifest(), "scenes", scenes);
    let spearman = EmbeddingTable::load(&layout.embed())
        .ok()
        .map(|(spec, table)| all_pairs_spearman(&spec, &table));
    push(&layout.embed(), "spearman", spearman);
    push(&layout.trace("flow"), "final_ce", last_csv_value(&layout.trace("flow"), "ce"));
    push(
        &layout.trace("grpo"),
        "final_mean_reward",
        last_csv_value(&layout.trace("grpo"), "mean_reward"),
    );
    push(
        &layout.eval_metrics(),
        "mean_pdms_at_max_steps",
        last_csv_value(&layout.eval_metrics(), "mean_pdms"),
    );
    let hash = cfg.hash();
    write_with(&layout.report(), |w| {
        writeln!(w, "artifact,present,metric,value,config_hash")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{hash}", r.artifact, r.present, r.metric, r.value)?;
        }
        Ok(())
    })?;
    Ok(rows)
}
