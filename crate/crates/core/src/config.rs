//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::CodebookSpec;
use crate::embedding::EmbedTrainConfig;
use crate::error::{Error, Result};
use crate::flow::FlowTrainConfig;
use crate::grpo::GrpoConfig;
use crate::net::Arch;
use crate::path::GibbsSchedule;
use crate::sampler::SamplerConfig;

/// Environment variable that may replace the output directory. No other
/// setting is read from the environment.
pub const OUT_ENV: &str = "FLOWPLAN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub train_embeddings: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            train_embeddings: false,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps_list: Vec<usize>,
    pub snap: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps_list: vec![1, 2, 3, 5, 10],
            snap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Relative frequency of easy, medium and hard scenes.
    pub mix: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train: 2000,
            val: 100,
            test: 200,
            mix: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub codebook: CodebookSpec,
    pub schedule: GibbsSchedule,
    pub model: ModelConfig,
    pub embed: EmbedTrainConfig,
    pub flow: FlowTrainConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            codebook: CodebookSpec::desk(),
            schedule: GibbsSchedule::default(),
            model: ModelConfig::default(),
            embed: EmbedTrainConfig::default(),
            flow: FlowTrainConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, then applies the output-directory
    /// environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            vocab: self.codebook.size(),
            dims: crate::TRAJECTORY_DIMS,
            d_in: self.embed.dim,
            hidden: self.model.hidden,
        }
    }

    pub fn sampler(&self, steps: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            schedule: self.schedule,
            seed: self.eval.seed,
            snap: self.eval.snap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codebook.validate()?;
        self.schedule.validate()?;
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        self.arch().validate()?;
        if !(self.embed.lr > 0.0) || self.embed.steps == 0 || self.embed.batch == 0 || self.embed.dim == 0 {
            return Err(Error::Config("embed lr, steps, batch and dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.embed.global_fraction) {
            return Err(Error::Config("embed.global_fraction must lie in [0, 1]".into()));
        }
        self.flow.validate()?;
        self.grpo.validate()?;
        let steps = &self.eval.steps_list;
        if steps.is_empty() || steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "eval.steps_list {steps:?} must be positive and strictly increasing"
            )));
        }
        let mix = self.data.mix;
        if mix.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("data.mix {mix:?} must be nonnegative with a positive sum")));
        }
        if self.data.train == 0 {
            return Err(Error::Config("data.train must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the output directory blanked, so
    /// the same run written to two places hashes the same. First 16 hex
    /// digits.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_sections_fill_in() {
        let cfg = RunConfig::from_json(r#"{"flow": {"lr": 0.001, "steps": 10}}"#).unwrap();
        assert_eq!(cfg.flow.lr, 1e-3);
        assert_eq!(cfg.flow.batch, 64);
        assert_eq!(cfg.grpo, GrpoConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"flwo": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"grpo": {"gruop_size": 3}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn ranges_validated() {
        assert!(RunConfig::from_json(r#"{"grpo": {"group_size": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"steps_list": [3, 2]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"mix": [0, 0, 0]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"codebook": {"min": 1, "max": 0, "resolution": 0.1}}"#).is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.flow.seed = 9;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn json_roundtrip() {
        let a = RunConfig::default();
        assert_eq!(RunConfig::from_json(&a.to_json()).unwrap(), a);
    }
}
