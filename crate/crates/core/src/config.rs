//! Pipeline configuration, persisted as TOML.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ggnn_moco::GGNNConfig;
use crate::ir_corpus::DEFAULT_MIN_BLOCKS;
use crate::lm::LMConfig;
use crate::retrieval::{EvalConfig, EvalTask, DEFAULT_POOL_SIZE, DEFAULT_RECALL_KS};
use crate::sampling::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Skip instruction normalization.
    NoNorm,
    /// Replace the pretrained language model with hashed bag-of-tokens
    /// block embeddings.
    NoPlm,
    /// Replace the graph network with pooled block embeddings.
    NoGraph,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoNorm => "no_norm",
            Ablation::NoPlm => "no_plm",
            Ablation::NoGraph => "no_graph",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_norm" => Ok(Ablation::NoNorm),
            "no_plm" => Ok(Ablation::NoPlm),
            "no_graph" => Ok(Ablation::NoGraph),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_norm: bool,
    pub no_plm: bool,
    pub no_graph: bool,
}

impl Ablations {
    pub fn enable(&mut self, a: Ablation) {
        match a {
            Ablation::NoNorm => self.no_norm = true,
            Ablation::NoPlm => self.no_plm = true,
            Ablation::NoGraph => self.no_graph = true,
        }
    }

    pub fn active(&self) -> Vec<Ablation> {
        [
            (self.no_norm, Ablation::NoNorm),
            (self.no_plm, Ablation::NoPlm),
            (self.no_graph, Ablation::NoGraph),
        ]
        .into_iter()
        .filter_map(|(on, a)| on.then_some(a))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n_groups: usize,
    pub variants: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n_groups: 50,
            variants: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub tasks: Vec<EvalTask>,
    pub pool_size: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub recall_ks: Vec<usize>,
    pub allow_short: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tasks: EvalTask::ALL.to_vec(),
            pool_size: DEFAULT_POOL_SIZE,
            n_pos: 10_000,
            n_neg: 10_000,
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            allow_short: true,
        }
    }
}

impl EvalSettings {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            pool_size: self.pool_size,
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            recall_ks: self.recall_ks.clone(),
            allow_short: self.allow_short,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Root of the `.ll` corpus.
    pub corpus_dir: PathBuf,
    /// Glob relative to `corpus_dir`.
    pub input_glob: String,
    /// Metadata manifest, relative to `corpus_dir` unless absolute.
    pub manifest: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub min_blocks: usize,
    pub vocab_min_count: usize,
    /// Fraction of source identities held out for evaluation; 0 evaluates
    /// on the training functions.
    pub test_fraction: f64,
    pub ablations: Ablations,
    pub sampling: SamplingConfig,
    pub lm: LMConfig,
    pub ggnn: GGNNConfig,
    pub eval: EvalSettings,
    pub synth: SynthSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus_dir: PathBuf::from("corpus"),
            input_glob: "**/*.ll".into(),
            manifest: None,
            work_dir: PathBuf::from("work"),
            min_blocks: DEFAULT_MIN_BLOCKS,
            vocab_min_count: 1,
            test_fraction: 0.3,
            ablations: Ablations::default(),
            sampling: SamplingConfig::default(),
            lm: LMConfig::default(),
            ggnn: GGNNConfig::default(),
            eval: EvalSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = PipelineConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.corpus_dir.is_relative() {
            self.corpus_dir = base.join(&self.corpus_dir);
        }
        if self.work_dir.is_relative() {
            self.work_dir = base.join(&self.work_dir);
        }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.as_ref().map(|m| {
            if m.is_relative() {
                self.corpus_dir.join(m)
            } else {
                m.clone()
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_blocks < 1 {
            return Err(Error::Config("min_blocks must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        if self.sampling.max_len > self.lm.max_position || self.lm.block_max_len > self.lm.max_position {
            return Err(Error::Config(format!(
                "sequence lengths ({}, {}) exceed lm.max_position {}",
                self.sampling.max_len, self.lm.block_max_len, self.lm.max_position
            )));
        }
        if self.lm.heads == 0 || !self.lm.hidden.is_multiple_of(self.lm.heads) {
            return Err(Error::Config(format!(
                "lm.hidden {} not divisible by lm.heads {}",
                self.lm.hidden, self.lm.heads
            )));
        }
        self.ggnn.validate()?;
        if self.eval.pool_size < 2 {
            return Err(Error::Config("eval.pool_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Desk-scale settings used by the end-to-end acceptance run.
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 7,
            test_fraction: 0.4,
            sampling: SamplingConfig {
                walks_per_node: 1,
                max_len: 48,
                max_pairs: 6000,
            },
            lm: LMConfig {
                layers: 2,
                hidden: 64,
                heads: 4,
                max_position: 64,
                lr: 1e-3,
                batch_size: 32,
                epochs: 2,
                block_max_len: 64,
                ..LMConfig::default()
            },
            ggnn: GGNNConfig {
                steps: 4,
                node_dim: 64,
                out_dim: 64,
                lr: 1e-3,
                batch_size: 32,
                epochs: 5,
                queue_capacity: 512,
                momentum: 0.99,
                init_std: 0.1,
                ..GGNNConfig::default()
            },
            eval: EvalSettings {
                tasks: vec![EvalTask::Xa, EvalTask::Xo, EvalTask::Xc],
                n_pos: 2000,
                n_neg: 2000,
                ..EvalSettings::default()
            },
            ..PipelineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = PipelineConfig::desk();
        c.manifest = Some("manifest.json".into());
        c.ablations.no_graph = true;
        let text = c.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = PipelineConfig::from_toml("seed = 3\n[ggnn]\nsteps = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.ggnn.steps, 2);
        assert_eq!(c.ggnn.queue_capacity, 8192);
        assert_eq!(c.lm.hidden, 128);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_toml("[ggnn]\ntemperature = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml("[ggnn]\nmomentum = 1.0\n").is_err());
        assert!(PipelineConfig::from_toml("[eval]\ntasks = [\"XZ\"]\n").is_err());
        assert!(PipelineConfig::from_toml("min_blocks = 0\n").is_err());
    }

    #[test]
    fn ablation_names() {
        for a in [Ablation::NoNorm, Ablation::NoPlm, Ablation::NoGraph] {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }
}
