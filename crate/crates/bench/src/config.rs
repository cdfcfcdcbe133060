//! The JSON run configuration accepted by `ecibench train`.

use std::path::{Path, PathBuf};

use ecibench_core::eci::{EciConfig, PoolAxis};
use ecibench_core::eval::EvalMode;
use ecibench_core::lora::LoraConfig;
use ecibench_core::prompts::PromptStyle;
use ecibench_core::quant::QuantOptions;
use ecibench_core::train::{Reduction, TrainConfig};
use ecibench_core::ModelConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "ECIBENCH_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Schema {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn default_max_kernel() -> usize {
    5
}
fn default_avg_kernel() -> usize {
    8
}
fn default_hidden() -> Vec<usize> {
    vec![256, 64]
}

/// Head settings; class names, sequence length and width come from the data
/// and the model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EciSection {
    #[serde(default = "default_max_kernel")]
    pub max_kernel: usize,
    #[serde(default = "default_avg_kernel")]
    pub avg_kernel: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
}

impl Default for EciSection {
    fn default() -> Self {
        Self {
            max_kernel: default_max_kernel(),
            avg_kernel: default_avg_kernel(),
            hidden_widths: default_hidden(),
        }
    }
}

impl EciSection {
    pub fn head_config(&self, class_names: Vec<String>, model: &ModelConfig) -> EciConfig {
        EciConfig {
            max_kernel: self.max_kernel,
            avg_kernel: self.avg_kernel,
            max_axis: PoolAxis::Sequence,
            avg_axis: PoolAxis::Embedding,
            hidden_widths: self.hidden_widths.clone(),
            class_names,
            seq_len: model.max_seq_len,
            d_model: model.d_model,
        }
    }
}

fn default_lambda() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    5e-5
}
fn default_wd() -> f64 {
    0.01
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

/// Optimizer and schedule; the shuffling seed is the run's top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr_start: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub textgen_reduction: Reduction,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr_start: self.lr_start,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.eps,
            seed,
            textgen_reduction: self.textgen_reduction,
            grad_clip: self.grad_clip,
        }
    }
}

/// Optional next-token warm-up of the base model on the training text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

fn default_max_new_tokens() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    #[serde(default)]
    pub style: PromptStyle,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            style: PromptStyle::default(),
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub losses_csv: PathBuf,
}

fn default_mode() -> EvalMode {
    EvalMode::Both
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub eci: EciSection,
    pub training: TrainingSection,
    pub data: DataSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default = "default_mode")]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub quantization: Option<QuantOptions>,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Schema {
            path: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates; relative paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(e) = self.data.eval.as_mut() {
            fix(e);
        }
        fix(&mut self.output.checkpoint);
        fix(&mut self.output.losses_csv);
    }

    /// Replaces the seed with `ECIBENCH_SEED` when that is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: ecibench_core::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.training.train_config(self.seed).validate().map_err(invalid)?;
        if self.lora.rank == 0 {
            return Err(ConfigError::Invalid("lora.rank must be positive".into()));
        }
        if self.lora.targets.is_empty() {
            return Err(ConfigError::Invalid("lora.targets is empty".into()));
        }
        // Two placeholder classes are enough to check the pooling geometry.
        self.eci
            .head_config(vec!["a".into(), "b".into()], &self.model)
            .validate()
            .map_err(invalid)?;
        if self.prompt.max_new_tokens >= self.model.max_seq_len {
            return Err(ConfigError::Invalid(format!(
                "prompt.max_new_tokens {} must be below model.max_seq_len {}",
                self.prompt.max_new_tokens, self.model.max_seq_len
            )));
        }
        if let Some(q) = self.quantization {
            if q.block_size == 0 {
                return Err(ConfigError::Invalid("quantization.block_size must be positive".into()));
            }
        }
        if let Some(p) = self.pretrain {
            if p.batch_size == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(ConfigError::Invalid("pretrain needs a positive lr and batch_size".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "model": {"vocab_size": 258, "d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 40, "ff_mult": 2},
        "training": {"total_steps": 4, "batch_size": 2},
        "data": {"train": "train.jsonl"},
        "output": {"checkpoint": "out.ecif", "losses_csv": "losses.csv"}
    }"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(MINIMAL, "t").unwrap();
        assert_eq!(cfg.lora, LoraConfig::default());
        assert_eq!(cfg.training.lambda, 0.5);
        assert_eq!(cfg.eval_mode, EvalMode::Both);
        assert_eq!(cfg.training.train_config(cfg.seed).seed, 3);
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let text = MINIMAL.replacen("\"seed\": 3,", "\"seed\": 3, \"sede\": 4,", 1);
        assert!(matches!(RunConfig::from_json(&text, "t"), Err(ConfigError::Schema { .. })));
        let text = MINIMAL.replacen("\"batch_size\": 2", "\"batch_size\": 2, \"seed\": 1", 1);
        assert!(matches!(RunConfig::from_json(&text, "t"), Err(ConfigError::Schema { .. })));
    }

    #[test]
    fn bad_values_are_rejected() {
        let text = MINIMAL.replacen("\"total_steps\": 4", "\"total_steps\": 4, \"lambda\": 1.5", 1);
        assert!(matches!(RunConfig::from_json(&text, "t"), Err(ConfigError::Invalid(_))));
        let text = MINIMAL.replacen("\"n_heads\": 2", "\"n_heads\": 3", 1);
        assert!(matches!(RunConfig::from_json(&text, "t"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::from_json(MINIMAL, "t").unwrap();
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::from_json(MINIMAL, "t").unwrap();
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(cfg.data.train, PathBuf::from("/runs/a/train.jsonl"));
        assert_eq!(cfg.output.checkpoint, PathBuf::from("/runs/a/out.ecif"));
    }
}
