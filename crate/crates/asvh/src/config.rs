//! Flat `key = value` run configuration. One namespace per module
//! (`sampler.*`, `loss.*`, `centers.*`, `train.*`, `model.*`); `#` starts a
//! comment; unknown keys are rejected so typos cannot silently fall back to
//! defaults.

use crate::error::{AsvhError, Result};
use crate::hashnet::HashNetConfig;
use crate::objectives::LossConfig;
use crate::sampler::SamplerConfig;
use crate::semantic_centers::{ClusterConfig, EmbeddingStage};
use crate::trainer::{OptimizerKind, TrainConfig};
use std::path::Path;

/// Merged view of every module's configuration.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub centers: ClusterConfig,
    pub train: TrainConfig,
    pub model: HashNetConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        AsvhError::Config(format!("key '{key}': cannot parse '{raw}'"))
    })
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AsvhError::Config(format!(
            "key '{key}': expected a boolean, got '{raw}'"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sampler.drop_count" => self.sampler.drop_count = parse_num(key, v)?,
            "sampler.delta" => self.sampler.delta = parse_num(key, v)?,
            "sampler.epsilon" => self.sampler.epsilon = parse_num(key, v)?,

            "loss.alpha" => self.loss.alpha = parse_num(key, v)?,
            "loss.beta" => self.loss.beta = parse_num(key, v)?,
            "loss.tau1" => self.loss.tau1 = parse_num(key, v)?,
            "loss.tau2" => self.loss.tau2 = parse_num(key, v)?,
            "loss.use_soft_codes" => self.loss.use_soft_codes = parse_bool(key, v)?,
            "loss.include_positive_in_denominator" => {
                self.loss.include_positive_in_denominator = parse_bool(key, v)?
            }

            "centers.granularities" => {
                self.centers.granularities = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "centers.kmeans_max_iters" => self.centers.kmeans_max_iters = parse_num(key, v)?,
            "centers.kmeans_tolerance" => self.centers.kmeans_tolerance = parse_num(key, v)?,
            "centers.refresh_every_epochs" => {
                self.centers.refresh_every_epochs = parse_num(key, v)?
            }
            "centers.embedding_stage" => {
                self.centers.embedding_stage = match v {
                    "soft_hash" => EmbeddingStage::SoftHash,
                    "encoder_output" => EmbeddingStage::EncoderOutput,
                    _ => {
                        return Err(AsvhError::Config(format!(
                            "key '{key}': expected soft_hash or encoder_output, got '{v}'"
                        )))
                    }
                }
            }
            "centers.seed" => self.centers.seed = parse_num(key, v)?,

            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(AsvhError::Config(format!(
                            "key '{key}': expected adam or sgd, got '{v}'"
                        )))
                    }
                }
            }
            "train.adam_beta1" => self.train.adam_beta1 = parse_num(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse_num(key, v)?,
            "train.adam_epsilon" => self.train.adam_epsilon = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "train.disable_grl" => self.train.disable_grl = parse_bool(key, v)?,
            "train.random_sampler" => self.train.random_sampler = parse_bool(key, v)?,
            "train.disable_fr" => self.train.disable_fr = parse_bool(key, v)?,
            "train.disable_vc" => self.train.disable_vc = parse_bool(key, v)?,
            "train.disable_p2set" => self.train.disable_p2set = parse_bool(key, v)?,

            "model.code_bits" => self.model.code_bits = parse_num(key, v)?,
            "model.feature_dim" => self.model.feature_dim = parse_num(key, v)?,
            "model.d_model" => self.model.d_model = parse_num(key, v)?,
            "model.encoder_layers" => self.model.encoder_layers = parse_num(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse_num(key, v)?,
            "model.attention_heads" => self.model.attention_heads = parse_num(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_num(key, v)?,
            "model.max_frames" => self.model.max_frames = parse_num(key, v)?,

            _ => return Err(AsvhError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a whole config file body over the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AsvhError::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Cross-module validation (structure only; data-dependent checks happen
    /// where the data is known).
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.model.max_frames)?;
        Ok(())
    }
}
