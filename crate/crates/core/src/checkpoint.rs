//! Self-describing JSON checkpoints: format version, model and tokenizer
//! configuration, vocabulary and every parameter tensor. Floats are written
//! in shortest round-trip form, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::data::{tokenize, DataError, SplitMode, Tokenized, Vocab};
use crate::error::ModelError;
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found:?} is not supported (expected {expected})")]
    Version { found: Option<u64>, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub split: SplitMode,
    pub max_seq_len: usize,
    /// Ordinary tokens in id order, after the reserved block.
    pub vocab: Vec<String>,
}

impl TokenizerConfig {
    pub fn new(split: SplitMode, max_seq_len: usize, vocab: &Vocab) -> Self {
        Self {
            split,
            max_seq_len,
            vocab: vocab.to_text().lines().map(str::to_string).collect(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.vocab.iter().cloned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    /// Free-form facts (seed, best epoch, dev F1).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, tokenizer: TokenizerConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.config().clone(),
            tokenizer,
            meta: BTreeMap::new(),
            params: model.params().clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(FORMAT_VERSION)) {
            return Err(CheckpointError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let mut ck: Checkpoint = serde_json::from_value(raw)?;
        ck.params.rebuild_index();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn build_model(&self) -> Result<Model, ModelError> {
        if self.tokenizer.vocab.len() + 5 > self.model.encoder.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary of {} tokens exceeds the embedding table of {}",
                self.tokenizer.vocab.len() + 5,
                self.model.encoder.vocab_size
            )));
        }
        Model::from_parts(self.model.clone(), self.params.clone())
    }

    pub fn tokenize(&self, vocab: &Vocab, words: &[String]) -> Tokenized {
        tokenize(words, vocab, self.tokenizer.split, self.tokenizer.max_seq_len)
    }
}
