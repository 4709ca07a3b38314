//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8, `#` starts a comment, keys are dotted (`encoder.depth`).
//! The presets `encoder.preset` and `train.preset` are applied before any
//! other key, so explicit values always win over the preset they follow.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lasoftmoe::data::SyntheticDatasetSpec;
use lasoftmoe::encoder::{EncoderConfig, ModelVariant, TemplateId};
use lasoftmoe::gradsuite::{DEFAULT_H, DEFAULT_TOL};
use lasoftmoe::trainkit::{AblationConfig, ThresholdPolicy, TrainConfig};
use thiserror::Error;

pub const RESOLVED_CONFIG: &str = "resolved.conf";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: line {line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn parse(key: &str, v: &str) -> Result<Self, ConfigError> {
        match v {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(value_err(key, "expected `desk` or `paper`")),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Every known key with a one-line description, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization and batch order"),
    ("paths.data", "dataset directory holding train/eval/test .uads files"),
    ("prompts.file", "prompt template file, one template per line (empty: built-in T-1..T-8)"),
    ("encoder.preset", "encoder size preset applied first: desk | paper"),
    ("encoder.variant", "vanilla | softmoe | la_softmoe"),
    ("encoder.depth", "number of encoder blocks"),
    ("encoder.d_model", "token width"),
    ("encoder.heads", "attention heads"),
    ("encoder.experts", "experts per MoE layer"),
    ("encoder.slots", "slots per expert"),
    ("encoder.moe_dim", "width inside the MoE layer"),
    ("encoder.patch_size", "patch edge in pixels"),
    ("encoder.image_size", "image edge in pixels (also used by gen-data)"),
    ("encoder.channels", "image channels (also used by gen-data)"),
    ("encoder.embed_dim", "joint embedding width"),
    ("encoder.text_width", "text token embedding width"),
    ("encoder.moe_zero_init", "start MoE output projections at zero"),
    ("train.preset", "optimizer preset applied first: desk (lr 1e-3) | paper (lr 1e-6)"),
    ("train.epochs", "passes over the train split"),
    ("train.batch_size", "even minibatch size"),
    ("train.learning_rate", "Adam step size"),
    ("train.warmup_steps", "steps of linear learning-rate warmup, 0 = none"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam denominator epsilon"),
    ("train.template", "prompt template used for training and scoring"),
    ("data.subjects_train", "subjects in the train split"),
    ("data.subjects_eval", "subjects in the eval split"),
    ("data.subjects_test", "subjects in the test split"),
    ("data.per_subject_live", "live samples per subject"),
    ("data.per_subject_phys", "physical-attack samples per subject"),
    ("data.per_subject_digital", "digital-attack samples per subject"),
    ("data.noise_sigma", "pixel noise standard deviation"),
    ("data.gap", "fake-mode separation relative to the live-to-fake distance"),
    ("data.amplitude", "attack texture amplitude"),
    ("data.subject_sigma", "per-subject offset scale"),
    ("eval.split", "split scored by eval and dump-embeddings: train | eval | test"),
    ("eval.threshold_policy", "fixed:<t> | eer-threshold-on-eval"),
    ("ablate.seeds", "comma-separated training seeds"),
    ("ablate.parallel", "train the three variants of a seed concurrently"),
    ("gradcheck.h", "finite-difference step"),
    ("gradcheck.tol", "relative error tolerance"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub prompts_file: Option<PathBuf>,
    pub encoder_preset: Preset,
    pub encoder: EncoderConfig,
    pub train_preset: Preset,
    pub train: TrainConfig,
    pub data: SyntheticDatasetSpec,
    pub eval_split: String,
    pub threshold_policy: ThresholdPolicy,
    pub ablate_seeds: Vec<u64>,
    pub ablate_parallel: bool,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            prompts_file: None,
            encoder_preset: Preset::Desk,
            encoder: EncoderConfig::desk(),
            train_preset: Preset::Desk,
            train: TrainConfig::desk(),
            data: SyntheticDatasetSpec::default(),
            eval_split: "test".into(),
            threshold_policy: ThresholdPolicy::default(),
            ablate_seeds: AblationConfig::DEFAULT_SEEDS.to_vec(),
            ablate_parallel: false,
            gradcheck_h: DEFAULT_H,
            gradcheck_tol: DEFAULT_TOL,
        }
    }
}

fn value_err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| value_err(key, format!("{v:?}: {e}")))
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: origin.to_string(),
            line: i + 1,
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
            });
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses one `KEY=VALUE` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
        origin: format!("--set {s}"),
        line: 1,
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Applies pairs in order after the presets they contain.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, _) in pairs {
            if !KEYS.iter().any(|(key, _)| key == k) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        for preset_key in ["encoder.preset", "train.preset"] {
            if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k == preset_key) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in pairs {
            if k != "encoder.preset" && k != "train.preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_pairs(&text, &path.display().to_string())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = num(key, v)?,
            "paths.data" => self.data_dir = path_or_none(v),
            "prompts.file" => self.prompts_file = path_or_none(v),
            "encoder.preset" => {
                self.encoder_preset = Preset::parse(key, v)?;
                let variant = e.variant;
                *e = match self.encoder_preset {
                    Preset::Desk => EncoderConfig::desk(),
                    Preset::Paper => EncoderConfig::vit_b16(),
                }
                .with_variant(variant);
            }
            "encoder.variant" => e.variant = v.parse().map_err(|err| value_err(key, format!("{err}")))?,
            "encoder.depth" => e.depth = num(key, v)?,
            "encoder.d_model" => e.d_model = num(key, v)?,
            "encoder.heads" => e.heads = num(key, v)?,
            "encoder.experts" => e.experts = num(key, v)?,
            "encoder.slots" => e.slots = num(key, v)?,
            "encoder.moe_dim" => e.moe_dim = num(key, v)?,
            "encoder.patch_size" => e.patch_size = num(key, v)?,
            "encoder.image_size" => e.image_size = num(key, v)?,
            "encoder.channels" => e.channels = num(key, v)?,
            "encoder.embed_dim" => e.embed_dim = num(key, v)?,
            "encoder.text_width" => e.text_width = num(key, v)?,
            "encoder.moe_zero_init" => e.moe_zero_init = num(key, v)?,
            "train.preset" => {
                self.train_preset = Preset::parse(key, v)?;
                t.learning_rate = match self.train_preset {
                    Preset::Desk => TrainConfig::desk().learning_rate,
                    Preset::Paper => TrainConfig::FINE_TUNE_LEARNING_RATE,
                };
            }
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.warmup_steps" => t.warmup_steps = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.template" => {
                t.template = v.parse::<TemplateId>().map_err(|err| value_err(key, err.to_string()))?
            }
            "data.subjects_train" => d.subjects[0] = num(key, v)?,
            "data.subjects_eval" => d.subjects[1] = num(key, v)?,
            "data.subjects_test" => d.subjects[2] = num(key, v)?,
            "data.per_subject_live" => d.per_subject[0] = num(key, v)?,
            "data.per_subject_phys" => d.per_subject[1] = num(key, v)?,
            "data.per_subject_digital" => d.per_subject[2] = num(key, v)?,
            "data.noise_sigma" => d.noise_sigma = num(key, v)?,
            "data.gap" => d.gap = num(key, v)?,
            "data.amplitude" => d.amplitude = num(key, v)?,
            "data.subject_sigma" => d.subject_sigma = num(key, v)?,
            "eval.split" => {
                if !lasoftmoe::data::SPLIT_NAMES.contains(&v) {
                    return Err(value_err(key, "expected train, eval or test"));
                }
                self.eval_split = v.to_string();
            }
            "eval.threshold_policy" => self.threshold_policy = v.parse().map_err(|err: String| value_err(key, err))?,
            "ablate.seeds" => {
                self.ablate_seeds = v
                    .split(',')
                    .map(|s| num::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "ablate.parallel" => self.ablate_parallel = num(key, v)?,
            "gradcheck.h" => self.gradcheck_h = num(key, v)?,
            "gradcheck.tol" => self.gradcheck_tol = num(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in the config file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.encoder;
        let t = &self.train;
        let d = &self.data;
        Some(match key {
            "seed" => self.seed.to_string(),
            "paths.data" => path_str(&self.data_dir),
            "prompts.file" => path_str(&self.prompts_file),
            "encoder.preset" => self.encoder_preset.as_str().into(),
            "encoder.variant" => e.variant.to_string(),
            "encoder.depth" => e.depth.to_string(),
            "encoder.d_model" => e.d_model.to_string(),
            "encoder.heads" => e.heads.to_string(),
            "encoder.experts" => e.experts.to_string(),
            "encoder.slots" => e.slots.to_string(),
            "encoder.moe_dim" => e.moe_dim.to_string(),
            "encoder.patch_size" => e.patch_size.to_string(),
            "encoder.image_size" => e.image_size.to_string(),
            "encoder.channels" => e.channels.to_string(),
            "encoder.embed_dim" => e.embed_dim.to_string(),
            "encoder.text_width" => e.text_width.to_string(),
            "encoder.moe_zero_init" => e.moe_zero_init.to_string(),
            "train.preset" => self.train_preset.as_str().into(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.warmup_steps" => t.warmup_steps.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.template" => t.template.to_string(),
            "data.subjects_train" => d.subjects[0].to_string(),
            "data.subjects_eval" => d.subjects[1].to_string(),
            "data.subjects_test" => d.subjects[2].to_string(),
            "data.per_subject_live" => d.per_subject[0].to_string(),
            "data.per_subject_phys" => d.per_subject[1].to_string(),
            "data.per_subject_digital" => d.per_subject[2].to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            "data.gap" => d.gap.to_string(),
            "data.amplitude" => d.amplitude.to_string(),
            "data.subject_sigma" => d.subject_sigma.to_string(),
            "eval.split" => self.eval_split.clone(),
            "eval.threshold_policy" => self.threshold_policy.to_string(),
            "ablate.seeds" => self
                .ablate_seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "ablate.parallel" => self.ablate_parallel.to_string(),
            "gradcheck.h" => self.gradcheck_h.to_string(),
            "gradcheck.tol" => self.gradcheck_tol.to_string(),
            _ => return None,
        })
    }

    /// Every key with its value; parsing this text reproduces `self`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.encoder.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.data_spec().validate().map_err(|e| invalid(&e))?;
        if self.ablate_seeds.is_empty() {
            return Err(ConfigError::Invalid("ablate.seeds is empty".into()));
        }
        if !(self.gradcheck_h > 0.0 && self.gradcheck_tol > 0.0) {
            return Err(ConfigError::Invalid("gradcheck.h and gradcheck.tol must be > 0".into()));
        }
        Ok(())
    }

    /// Generator spec; image geometry and seed come from the encoder and `seed`.
    pub fn data_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            seed: self.seed,
            image_size: self.encoder.image_size,
            channels: self.encoder.channels,
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.encoder.variant
    }
}

/// `--help` appendix: every key with its default.
pub fn defaults_table() -> String {
    let d = RunConfig::default();
    let mut out = String::from("Configuration keys (file `key = value` lines or --set key=value), with defaults:\n");
    for (k, doc) in KEYS {
        let v = d.get(k).expect("listed key");
        let shown = if v.is_empty() { "\"\"".to_string() } else { v };
        let _ = writeln!(out, "  {k:<28}{shown:<16}{doc}");
    }
    out.push_str("\nExit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numeric failure.\n");
    out
}
