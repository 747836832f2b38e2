//! Experiment configuration. Hyperparameter keys follow the names used in the
//! original fine-tuning setup (`per_device_train_batch_size`,
//! `soft_attention_layer_size`, ...).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{SplitMode, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::ModelError;
use crate::lime::LimeConfig;
use crate::model::{HeadKind, ModelConfig};
use crate::pipeline::HeadOptions;
use crate::softattn::HeadConfig;
use crate::train::{Profile, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initializer {
    #[default]
    Glorot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            num_layers: e.num_layers,
            num_attention_heads: e.num_heads,
            hidden_size: e.model_dim,
            intermediate_size: e.ffn_dim,
        }
    }
}

/// Where sentences come from: TSV files, or the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub split: SplitMode,
    /// Share of train held out as dev when no dev file is given.
    pub dev_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            synthetic: None,
            split: SplitMode::default(),
            dev_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    pub classifier_head: HeadKind,
    pub gamma: f64,
    pub beta: f64,
    pub max_seq_length: usize,
    pub per_device_train_batch_size: usize,
    pub per_device_eval_batch_size: usize,
    pub num_train_epochs: usize,
    pub warmup_ratio: f64,
    /// Taken from `profile` when absent.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub hidden_layer_dropout: f64,
    pub soft_attention_layer_size: usize,
    pub soft_attention_hidden_size: usize,
    pub initializer: Initializer,
    pub encoder: EncoderSection,
    pub data: DataSection,
    pub lime: LimeConfig,
    pub head_scoring: HeadOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            seed: t.seed,
            profile: Profile::MicroScratch,
            classifier_head: m.head,
            gamma: t.gamma,
            beta: t.beta,
            max_seq_length: m.encoder.max_seq_len,
            per_device_train_batch_size: t.batch_size,
            per_device_eval_batch_size: t.eval_batch_size,
            num_train_epochs: t.epochs,
            warmup_ratio: t.warmup_ratio,
            learning_rate: None,
            weight_decay: t.weight_decay,
            adam_epsilon: t.adam_epsilon,
            max_grad_norm: t.max_grad_norm,
            hidden_layer_dropout: m.encoder.dropout_prob,
            soft_attention_layer_size: m.attn_layer_size,
            soft_attention_hidden_size: m.attn_hidden_size,
            initializer: Initializer::Glorot,
            encoder: EncoderSection::default(),
            data: DataSection::default(),
            lime: LimeConfig::default(),
            head_scoring: HeadOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Model configuration; the vocabulary size is fixed later from the data.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: EncoderConfig::default().vocab_size,
                max_seq_len: self.max_seq_length,
                num_layers: self.encoder.num_layers,
                num_heads: self.encoder.num_attention_heads,
                model_dim: self.encoder.hidden_size,
                ffn_dim: self.encoder.intermediate_size,
                dropout_prob: self.hidden_layer_dropout,
            },
            head: self.classifier_head,
            soft_attention: HeadConfig {
                beta: self.beta,
                gamma: self.gamma,
                ..Default::default()
            },
            attn_layer_size: self.soft_attention_layer_size,
            attn_hidden_size: self.soft_attention_hidden_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.num_train_epochs,
            batch_size: self.per_device_train_batch_size,
            eval_batch_size: self.per_device_eval_batch_size,
            learning_rate: self.learning_rate.unwrap_or(self.profile.learning_rate()),
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            adam_epsilon: self.adam_epsilon,
            max_grad_norm: self.max_grad_norm,
            gamma: self.gamma,
            beta: self.beta,
            seed: self.seed,
            ..TrainConfig::profile(self.profile)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut mc = self.model_config();
        mc.encoder.vocab_size = mc.encoder.vocab_size.max(16);
        mc.validate()?;
        self.train_config().validate()?;
        if !(0.0..1.0).contains(&self.data.dev_fraction) {
            return Err(ModelError::Config(format!(
                "dev_fraction {} outside [0, 1)",
                self.data.dev_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(feature = "cli")]
impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serialises")
    }
}

#[cfg(all(test, feature = "cli"))]
mod tests {
    use super::*;

    #[test]
    fn yaml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.learning_rate = Some(3e-4);
        cfg.data.synthetic = Some(SyntheticConfig::default());
        let back = ExperimentConfig::from_yaml(&cfg.to_yaml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reference_names_and_defaults() {
        let cfg = ExperimentConfig::from_yaml(
            "gamma: 0.1\nmax_seq_length: 128\nper_device_train_batch_size: 16\n\
             per_device_eval_batch_size: 64\nwarmup_ratio: 0.1\nlearning_rate: 2.0e-5\n\
             weight_decay: 0.1\nadam_epsilon: 1.0e-7\nhidden_layer_dropout: 0.1\n\
             soft_attention_layer_size: 100\nsoft_attention_hidden_size: 300\ninitializer: glorot\n",
        )
        .unwrap();
        let t = cfg.train_config();
        assert_eq!(t.learning_rate, 2e-5);
        assert_eq!(t.batch_size, 16);
        assert_eq!(t.adam_epsilon, 1e-7);
        let m = cfg.model_config();
        assert_eq!((m.attn_layer_size, m.attn_hidden_size), (100, 300));
        assert_eq!(ExperimentConfig::default().train_config().learning_rate, 1e-3);
        let p = ExperimentConfig::from_yaml("profile: pretrained-finetune\n").unwrap();
        assert_eq!(p.train_config().learning_rate, 2e-5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_yaml("initializer: xavier\n").is_err());
        assert!(ExperimentConfig::from_yaml("no_such_key: 1\n").is_err());
        assert!(ExperimentConfig::from_yaml("beta: 0.5\n").is_err());
        assert!(ExperimentConfig::from_yaml("encoder:\n  hidden_size: 10\n  num_attention_heads: 4\n").is_err());
    }
}
