//! Experiment configuration: TOML in, validated and normalized out.
//!
//! Unknown fields are rejected everywhere, including strategy parameters
//! that don't belong to the named strategy — a typo'd or leftover field is
//! a config error, never silently ignored. The parsed (default-filled)
//! config has a canonical SHA-256 digest used to pair checkpoints with the
//! configs that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffers::BufferPolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoggerKind {
    Text,
    Csv,
    Jsonl,
}

fn default_loggers() -> Vec<LoggerKind> {
    vec![LoggerKind::Text, LoggerKind::Csv, LoggerKind::Jsonl]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_loggers")]
    pub loggers: Vec<LoggerKind>,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub checkpoint: Option<CheckpointConfig>,
}

/// Exactly one of the sub-tables must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub split_synthetic: Option<SplitSyntheticConfig>,
    #[serde(default)]
    pub split_mnist: Option<SplitMnistConfig>,
    #[serde(default)]
    pub instance_incremental: Option<InstanceIncrementalConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSyntheticConfig {
    pub n_classes: usize,
    pub n_experiences: usize,
    pub n_per_class: usize,
    #[serde(default)]
    pub n_per_class_test: Option<usize>,
    pub dim: usize,
    pub spread: f64,
    #[serde(default)]
    pub task_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMnistConfig {
    pub n_experiences: usize,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub fixed_class_order: Option<Vec<usize>>,
}

/// Same classes throughout; each experience is a fresh shuffled slice of
/// the training data, each test experience the full test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceIncrementalConfig {
    pub n_classes: usize,
    pub n_experiences: usize,
    pub n_per_class: usize,
    #[serde(default)]
    pub n_per_class_test: Option<usize>,
    pub dim: usize,
    pub spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Incremental,
    Multihead,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; the input width comes from the benchmark.
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    #[serde(default = "default_true")]
    pub masking: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_save_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub path: PathBuf,
    #[serde(default = "default_save_every")]
    pub save_every_exp: usize,
}

fn default_replay_policy() -> BufferPolicy {
    BufferPolicy::ExperienceBalanced
}

/// Flat `[strategy]` table dispatched on `name`; each strategy accepts
/// exactly its own parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum StrategyConfig {
    Naive,
    Cumulative,
    Replay {
        mem_size: usize,
        #[serde(default = "default_replay_policy")]
        policy: BufferPolicy,
    },
    Ewc {
        lambda: f64,
        fisher_batches: usize,
    },
    Lwf {
        alpha: f64,
        temperature: f64,
    },
}

impl<'de> Deserialize<'de> for StrategyConfig {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;

        #[derive(Deserialize)]
        struct Raw {
            name: String,
            #[serde(flatten)]
            rest: serde_json::Map<String, serde_json::Value>,
        }

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ReplayFields {
            mem_size: usize,
            #[serde(default = "default_replay_policy")]
            policy: BufferPolicy,
        }

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct EwcFields {
            lambda: f64,
            fisher_batches: usize,
        }

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct LwfFields {
            alpha: f64,
            temperature: f64,
        }

        let raw = Raw::deserialize(deserializer)?;
        let rest = serde_json::Value::Object(raw.rest.clone());
        let ensure_bare = |strategy: &str| {
            if raw.rest.is_empty() {
                Ok(())
            } else {
                let keys: Vec<&String> = raw.rest.keys().collect();
                Err(DeError::custom(format!(
                    "strategy {strategy:?} takes no parameters, got {keys:?}"
                )))
            }
        };
        match raw.name.as_str() {
            "naive" => {
                ensure_bare("naive")?;
                Ok(StrategyConfig::Naive)
            }
            "cumulative" => {
                ensure_bare("cumulative")?;
                Ok(StrategyConfig::Cumulative)
            }
            "replay" => {
                let f: ReplayFields =
                    serde_json::from_value(rest).map_err(DeError::custom)?;
                Ok(StrategyConfig::Replay {
                    mem_size: f.mem_size,
                    policy: f.policy,
                })
            }
            "ewc" => {
                let f: EwcFields = serde_json::from_value(rest).map_err(DeError::custom)?;
                Ok(StrategyConfig::Ewc {
                    lambda: f.lambda,
                    fisher_batches: f.fisher_batches,
                })
            }
            "lwf" => {
                let f: LwfFields = serde_json::from_value(rest).map_err(DeError::custom)?;
                Ok(StrategyConfig::Lwf {
                    alpha: f.alpha,
                    temperature: f.temperature,
                })
            }
            other => Err(DeError::custom(format!(
                "unknown strategy {other:?} (expected naive, cumulative, replay, ewc, or lwf)"
            ))),
        }
    }
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Naive => "naive",
            StrategyConfig::Cumulative => "cumulative",
            StrategyConfig::Replay { .. } => "replay",
            StrategyConfig::Ewc { .. } => "ewc",
            StrategyConfig::Lwf { .. } => "lwf",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));

        let present = [
            self.benchmark.split_synthetic.is_some(),
            self.benchmark.split_mnist.is_some(),
            self.benchmark.instance_incremental.is_some(),
        ]
        .iter()
        .filter(|&&p| p)
        .count();
        if present != 1 {
            return bad(format!(
                "benchmark must name exactly one of split_synthetic, split_mnist, \
                 instance_incremental; found {present}"
            ));
        }
        if let Some(s) = &self.benchmark.split_synthetic {
            if s.n_classes == 0 || s.n_experiences == 0 || s.n_per_class == 0 || s.dim == 0 {
                return bad("split_synthetic sizes must all be >= 1".into());
            }
            if !(s.spread >= 0.0) || !s.spread.is_finite() {
                return bad(format!("spread must be finite and >= 0, got {}", s.spread));
            }
            if s.n_classes % s.n_experiences != 0 {
                return bad(format!(
                    "{} classes cannot split into {} equal experiences",
                    s.n_classes, s.n_experiences
                ));
            }
        }
        if let Some(m) = &self.benchmark.split_mnist {
            if m.n_experiences == 0 {
                return bad("split_mnist n_experiences must be >= 1".into());
            }
        }
        if let Some(i) = &self.benchmark.instance_incremental {
            if i.n_classes == 0 || i.n_experiences == 0 || i.n_per_class == 0 || i.dim == 0 {
                return bad("instance_incremental sizes must all be >= 1".into());
            }
            if !(i.spread >= 0.0) || !i.spread.is_finite() {
                return bad(format!("spread must be finite and >= 0, got {}", i.spread));
            }
            if i.n_classes * i.n_per_class < i.n_experiences {
                return bad(format!(
                    "{} examples cannot fill {} experiences",
                    i.n_classes * i.n_per_class,
                    i.n_experiences
                ));
            }
        }

        if self.model.hidden.is_empty() {
            return bad("model.hidden must list at least one layer width".into());
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return bad("model.hidden widths must be >= 1".into());
        }

        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return bad(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }

        match &self.strategy {
            StrategyConfig::Naive | StrategyConfig::Cumulative => {}
            StrategyConfig::Replay { mem_size, .. } => {
                if *mem_size == 0 {
                    return bad("replay mem_size must be >= 1".into());
                }
            }
            StrategyConfig::Ewc {
                lambda,
                fisher_batches,
            } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return bad(format!("ewc lambda must be positive, got {lambda}"));
                }
                if *fisher_batches == 0 {
                    return bad("ewc fisher_batches must be >= 1".into());
                }
            }
            StrategyConfig::Lwf { alpha, temperature } => {
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    return bad(format!("lwf alpha must be positive, got {alpha}"));
                }
                if !(*temperature > 0.0) || !temperature.is_finite() {
                    return bad(format!(
                        "lwf temperature must be positive, got {temperature}"
                    ));
                }
            }
        }

        if self.loggers.is_empty() {
            return bad("loggers must not be empty (omit the key for the default set)".into());
        }
        for (i, kind) in self.loggers.iter().enumerate() {
            if self.loggers[..i].contains(kind) {
                return bad(format!("duplicate logger {kind:?}"));
            }
        }

        if let Some(ck) = &self.checkpoint {
            if ck.save_every_exp == 0 {
                return bad("checkpoint.save_every_exp must be >= 1".into());
            }
        }
        Ok(())
    }
}

/// SHA-256 (hex) of the canonical JSON form of the parsed config. Two
/// configs digest equal exactly when every normalized field matches.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let digest = h.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
