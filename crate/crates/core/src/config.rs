//! Experiment configuration (TOML) and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, SamplerConfig};
use crate::nn::AdamConfig;
use crate::pipeline::PipelineConfig;
use crate::seed::derive_seed;
use crate::tts::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// The last this-many sentences are held out for evaluation.
    pub heldout: usize,
    pub frames_per_word: usize,
    pub frame_dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 64,
            sentences: 10_400,
            min_len: 4,
            max_len: 30,
            heldout: 400,
            frames_per_word: 4,
            frame_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Held-out sentences scored by bench-quality and sim-curve.
    pub test_sentences: usize,
    /// Held-out sentences timed by bench-latency.
    pub latency_sentences: usize,
    pub repetitions: usize,
    /// Extra LSTM layers run on every LM step during latency runs, emulating
    /// a much larger language model. Zero disables the emulation.
    pub lm_cost_layers: usize,
    pub lm_cost_width: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            test_sentences: 200,
            latency_sentences: 50,
            repetitions: 5,
            lm_cost_layers: 3,
            lm_cost_width: 512,
        }
    }
}

/// Optimizer settings shared by all stages; each stage sets its own rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimizerConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: AdamConfig::default().lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub sampler: SamplerConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchConfig,
    pub optimizer: OptimizerConfig,
}

/// Per-stage seeds expanded from the global one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub corpus: u64,
    pub oracle: u64,
    pub lm: u64,
    pub teacher: u64,
    pub distill: u64,
    pub eval: u64,
}

impl StageSeeds {
    pub fn from_global(seed: u64) -> Self {
        StageSeeds {
            corpus: derive_seed(seed, "stage.corpus"),
            oracle: derive_seed(seed, "stage.oracle"),
            lm: derive_seed(seed, "stage.lm"),
            teacher: derive_seed(seed, "stage.teacher"),
            distill: derive_seed(seed, "stage.distill"),
            eval: derive_seed(seed, "stage.eval"),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!("{origin}:{l}:{c}")
                })
                .unwrap_or_else(|| origin.to_string());
            Error::Config(format!("{loc}: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let field = |name: &str, msg: &str| Err(Error::Config(format!("field `{name}`: {msg}")));
        if c.heldout == 0 || c.heldout >= c.sentences {
            return field("corpus.heldout", "must be >= 1 and below corpus.sentences");
        }
        if c.frames_per_word == 0 || c.frame_dim < 2 {
            return field("corpus.frames_per_word", "need frames_per_word >= 1 and frame_dim >= 2");
        }
        if self.teacher.dims.frame_dim != c.frame_dim {
            return field("teacher.frame_dim", "must equal corpus.frame_dim");
        }
        if self.bench.test_sentences == 0 || self.bench.test_sentences > c.heldout {
            return field("bench.test_sentences", "must be in 1..=corpus.heldout");
        }
        if self.bench.latency_sentences == 0 || self.bench.latency_sentences > c.heldout {
            return field("bench.latency_sentences", "must be in 1..=corpus.heldout");
        }
        if self.bench.repetitions == 0 {
            return field("bench.repetitions", "must be >= 1");
        }
        self.sampler.validate()?;
        self.distill.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_global(self.seed)
    }

    /// SHA-256 of the canonical JSON form (defaults filled in).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..self.optimizer.adam()
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance of one subcommand run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input file name -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Command-line overrides applied on top of the config file.
    pub overrides: BTreeMap<String, String>,
    /// The resolved config (overrides applied), enough to rerun the stage.
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(subcommand: &str, cfg: &ExperimentConfig) -> Self {
        Manifest {
            subcommand: subcommand.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            overrides: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    fn key(dir: &Path, path: &Path) -> String {
        path.strip_prefix(dir).unwrap_or(path).display().to_string()
    }

    pub fn add_input(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.inputs.insert(Self::key(dir, path), file_digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.outputs.insert(Self::key(dir, path), file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
