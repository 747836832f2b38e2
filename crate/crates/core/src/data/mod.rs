//! Sentences, vocabularies, the word-per-line TSV format and the synthetic
//! cue-detection corpus.

mod synthetic;
mod tokenize;
mod tsv;
pub mod vocab;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive;

pub use synthetic::{generate_synthetic, CueVariant, SyntheticConfig, SyntheticSplits};
pub use tokenize::{detokenize, tokenize, SplitMode, Tokenized, CONTINUATION};
pub use tsv::{load_tsv, parse_tsv, write_tsv};
pub use vocab::{Vocab, CLS, MASK, PAD, SEP, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{0}: empty dataset")]
    Empty(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("sentence {sentence}: {message}")]
    Alignment { sentence: usize, message: String },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub sentence_label: bool,
    /// Gold word labels. Evaluation only: never reaches the trainer.
    pub token_labels: Option<Vec<bool>>,
}

impl LabeledSentence {
    pub fn new(words: Vec<String>, token_labels: Vec<bool>) -> Self {
        let sentence_label = token_labels.iter().any(|&l| l);
        Self {
            words,
            sentence_label,
            token_labels: Some(token_labels),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A non-fatal finding while loading.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sentences: Vec<LabeledSentence>,
    #[serde(default)]
    pub warnings: Vec<LoadWarning>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub positive_sentences: usize,
    pub words: usize,
    pub positive_words: usize,
    pub mean_length: f64,
    pub max_length: usize,
}

impl Dataset {
    pub fn new(sentences: Vec<LabeledSentence>) -> Self {
        Self {
            sentences,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn has_token_labels(&self) -> bool {
        !self.sentences.is_empty() && self.sentences.iter().all(|s| s.token_labels.is_some())
    }

    pub fn stats(&self) -> DatasetStats {
        let words: usize = self.sentences.iter().map(LabeledSentence::len).sum();
        let positive_words = self
            .sentences
            .iter()
            .filter_map(|s| s.token_labels.as_ref())
            .flatten()
            .filter(|&&l| l)
            .count();
        DatasetStats {
            sentences: self.len(),
            positive_sentences: self.sentences.iter().filter(|s| s.sentence_label).count(),
            words,
            positive_words,
            mean_length: if self.is_empty() {
                0.0
            } else {
                words as f64 / self.len() as f64
            },
            max_length: self.sentences.iter().map(LabeledSentence::len).max().unwrap_or(0),
        }
    }

    /// Tokenizes every sentence.
    pub fn tokenize(&self, vocab: &Vocab, mode: SplitMode, max_len: usize) -> Vec<Tokenized> {
        self.sentences
            .iter()
            .map(|s| tokenize(&s.words, vocab, mode, max_len))
            .collect()
    }

    /// Vocabulary of every piece in this dataset, in first-seen order.
    pub fn build_vocab(&self, mode: SplitMode) -> Vocab {
        Vocab::from_tokens(
            self.sentences
                .iter()
                .flat_map(|s| s.words.iter())
                .flat_map(|w| mode.pieces(w)),
        )
    }

    /// Splits off a seeded random `fraction` of sentences as a development set.
    /// Returns `(rest, dev)`; both keep the original relative order.
    pub fn holdout(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n_dev = ((self.len() as f64) * fraction).round() as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut derive(seed, 0xDE5));
        let mut is_dev = vec![false; self.len()];
        for &i in &idx[..n_dev] {
            is_dev[i] = true;
        }
        let (mut rest, mut dev) = (Vec::new(), Vec::new());
        for (s, d) in self.sentences.iter().zip(is_dev) {
            if d { dev.push(s.clone()) } else { rest.push(s.clone()) }
        }
        (Dataset::new(rest), Dataset::new(dev))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_is_disjoint_and_seeded() {
        let ds = Dataset::new(
            (0..50)
                .map(|i| LabeledSentence::new(vec![format!("w{i}")], vec![i % 2 == 0]))
                .collect(),
        );
        let (rest, dev) = ds.holdout(0.1, 3);
        assert_eq!(dev.len(), 5);
        assert_eq!(rest.len(), 45);
        for s in &dev.sentences {
            assert!(!rest.sentences.contains(s));
        }
        assert_eq!(ds.holdout(0.1, 3).1, dev);
    }

    #[test]
    fn stats_counts() {
        let ds = Dataset::new(vec![
            LabeledSentence::new(vec!["a".into(), "b".into()], vec![false, true]),
            LabeledSentence::new(vec!["c".into()], vec![false]),
        ]);
        let st = ds.stats();
        assert_eq!(st.positive_sentences, 1);
        assert_eq!(st.words, 3);
        assert_eq!(st.positive_words, 1);
        assert_eq!(st.max_length, 2);
        let json = serde_json::to_string(&st).unwrap();
        assert!(json.contains("\"positive_words\":1"));
    }
}
