//! Run configuration files and their command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dot_core::dot::{DoTConfig, LossMode, Preselector, TrainConfig};
use dot_core::encoder::EncoderConfig;
use dot_core::pruning::SelectionMode;
use dot_core::synth::{generate, BucketEdges, GeneratorSpec};
use dot_core::table::{read_jsonl, Example, TaskType};
use dot_core::tensor::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(GeneratorSpec),
    Jsonl(PathBuf),
}

impl DataSource {
    /// Relative paths resolve against `base` (the config file's directory).
    pub fn load(&self, base: &Path) -> Result<Vec<Example>> {
        match self {
            DataSource::Synthetic(gs) => Ok(generate(gs)?),
            DataSource::Jsonl(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default)]
    pub eval: Option<DataSource>,
}

/// Encoder dimensions; vocabulary and position table sizes come from the data
/// and the model section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub intermediate: usize,
}

/// A preset name (`mini`, `small`, `medium`, `large`) or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderChoice {
    Preset(String),
    Custom(EncoderShape),
}

impl EncoderChoice {
    fn resolve(&self, vocab: usize, max_input: usize) -> Result<EncoderConfig> {
        let base = match self {
            EncoderChoice::Preset(name) => EncoderConfig::preset(name)?,
            EncoderChoice::Custom(c) => EncoderConfig::new(c.num_layers, c.hidden, c.num_heads, c.intermediate),
        };
        Ok(base.with_vocab(vocab).with_max_input(max_input))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub pruning: Option<EncoderChoice>,
    pub task: EncoderChoice,
    pub pre_limit: usize,
    pub k: usize,
    #[serde(default = "cc")]
    pub preselector: Preselector,
    #[serde(default = "token")]
    pub selection: SelectionMode,
    #[serde(default = "j")]
    pub loss: LossMode,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub pruning_weight: f64,
    #[serde(default = "cell_selection")]
    pub task_type: TaskType,
    #[serde(default = "fifty")]
    pub score_clip: f64,
    /// Position table size of both encoders; defaults to `pre_limit`.
    #[serde(default)]
    pub max_input: Option<usize>,
}

fn cc() -> Preselector {
    Preselector::Cc
}
fn token() -> SelectionMode {
    SelectionMode::Token
}
fn j() -> LossMode {
    LossMode::J
}
fn one() -> f64 {
    1.0
}
fn fifty() -> f64 {
    50.0
}
fn cell_selection() -> TaskType {
    TaskType::CellSelection
}

impl ModelSpec {
    /// Concrete model for a vocabulary of `vocab` ids.
    pub fn resolve(&self, vocab: usize) -> Result<DoTConfig> {
        let max_input = self.max_input.unwrap_or(self.pre_limit);
        let pruning = self.pruning.as_ref().map(|p| p.resolve(vocab, max_input)).transpose()?;
        let mut cfg = DoTConfig::new(pruning, self.task.resolve(vocab, max_input)?, self.pre_limit, self.k);
        cfg.preselector = self.preselector;
        cfg.selection = self.selection;
        cfg.loss = self.loss;
        cfg.beta = self.beta;
        cfg.pruning_weight = self.pruning_weight;
        cfg.task_type = self.task_type;
        cfg.score_clip = self.score_clip;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Length bucket edges; `[64, 128, 256]` when absent.
    #[serde(default)]
    pub buckets: Option<Vec<usize>>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_bins() -> usize {
    20
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            buckets: None,
            histogram_bins: default_bins(),
        }
    }
}

impl EvalSettings {
    pub fn edges(&self) -> BucketEdges {
        self.buckets.clone().map(BucketEdges).unwrap_or_else(BucketEdges::desk)
    }
}

/// Contents of a `train` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

/// Contents of a `gen` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub schema_version: u32,
    pub generator: GeneratorSpec,
}

/// Flags that take precedence over file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(p) = o.precision {
            self.train.precision = p;
        }
        if let Some(t) = o.threads {
            self.train.threads = t;
        }
    }
}

impl GenConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.generator.seed = s;
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        bail!("unsupported schema_version {v}; expected {SCHEMA_VERSION}");
    }
    Ok(())
}

pub fn parse_run(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
    check_version(cfg.schema_version)?;
    Ok(cfg)
}

pub fn parse_gen(text: &str) -> Result<GenConfig> {
    let cfg: GenConfig = serde_json::from_str(text).context("parsing generator config")?;
    check_version(cfg.schema_version)?;
    Ok(cfg)
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "data": {"train": {"synthetic": {"seed": 1, "n_examples": 4, "rows": {"min": 2, "max": 3},
                 "cols": {"min": 2, "max": 3}, "cell_tokens": {"min": 1, "max": 1}, "vocab_size": 60,
                 "task": "lookup"}}},
        "model": {"pruning": "mini", "task": {"num_layers": 1, "hidden": 8, "num_heads": 2, "intermediate": 16},
                  "pre_limit": 40, "k": 10},
        "train": {"learning_rate": 0.001, "warmup_ratio": 0.1, "hidden_dropout": 0.0, "attention_dropout": 0.0,
                  "num_steps": 3, "batch_size": 2, "seed": 5, "precision": "f32"}
    }"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = parse_run(MINIMAL).unwrap();
        let dot = cfg.model.resolve(70).unwrap();
        assert_eq!(dot.pruning.as_ref().unwrap().hidden, 256);
        assert_eq!((dot.task.hidden, dot.task.vocab_size, dot.task.max_input), (8, 70, 40));
        assert_eq!(dot.loss, LossMode::J);
        assert_eq!(cfg.eval, EvalSettings::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let extra = MINIMAL.replacen("\"schema_version\": 1,", "\"schema_version\": 1, \"lr\": 3,", 1);
        assert!(parse_run(&extra).is_err());
        let nested = MINIMAL.replacen("\"k\": 10", "\"k\": 10, \"topk\": 3", 1);
        assert!(parse_run(&nested).is_err());
        let v2 = MINIMAL.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(parse_run(&v2).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = parse_run(MINIMAL).unwrap();
        let before = hash(&cfg).unwrap();
        cfg.apply(&Overrides::default());
        assert_eq!(hash(&cfg).unwrap(), before);
        cfg.apply(&Overrides {
            seed: Some(9),
            precision: Some(Precision::F64),
            threads: Some(3),
        });
        assert_eq!((cfg.train.seed, cfg.train.precision, cfg.train.threads), (9, Precision::F64, 3));
        assert_ne!(hash(&cfg).unwrap(), before);
    }

    #[test]
    fn jsonl_paths_resolve_against_base() {
        let dir = tempfile::tempdir().unwrap();
        let gs = GeneratorSpec::lookup(2, 3);
        let exs = generate(&gs).unwrap();
        dot_core::table::write_jsonl(&dir.path().join("d.jsonl"), &exs).unwrap();
        let src = DataSource::Jsonl("d.jsonl".into());
        assert_eq!(src.load(dir.path()).unwrap(), exs);
    }
}
