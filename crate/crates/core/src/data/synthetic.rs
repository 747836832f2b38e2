//! A planted-cue corpus: a sentence is positive exactly when it contains a cue.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, LabeledSentence};
use crate::rng::{derive, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueVariant {
    /// Any single lexicon word makes a sentence positive.
    #[default]
    Single,
    /// The lexicon is split into (opener, closer) pairs, like "either ... or".
    /// A sentence is positive only when a matched pair occurs in order; both
    /// words are labelled. Negative sentences may contain a lone half.
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub cue_lexicon_size: usize,
    pub positive_rate: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Upper bound on cue words in a positive sentence (single variant).
    pub max_cues: usize,
    pub variant: CueVariant,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            vocab_size: 200,
            cue_lexicon_size: 10,
            positive_rate: 0.5,
            min_length: 5,
            max_length: 15,
            max_cues: 1,
            variant: CueVariant::Single,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub cues: Vec<String>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return fail("positive_rate must lie in [0, 1]");
        }
        if self.cue_lexicon_size >= self.vocab_size {
            return fail("cue_lexicon_size must be smaller than vocab_size");
        }
        if self.positive_rate > 0.0 && self.cue_lexicon_size == 0 {
            return fail("positive sentences need a non-empty cue lexicon");
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return fail("need 1 <= min_length <= max_length");
        }
        if self.positive_rate > 0.0 && self.max_cues == 0 {
            return fail("max_cues must be at least 1");
        }
        if self.variant == CueVariant::Paired && self.positive_rate > 0.0 {
            if self.cue_lexicon_size < 2 || self.cue_lexicon_size % 2 != 0 {
                return fail("paired cues need an even lexicon of at least 2 words");
            }
            if self.max_length < 2 {
                return fail("paired cues need max_length >= 2");
            }
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct pronounceable pseudo-words of 2 to 9 letters.
fn pseudo_words(n: usize, rng: &mut SeededRng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(2..=9);
        let mut w = String::with_capacity(len);
        for i in 0..len {
            let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            w.push(set[rng.gen_range(0..set.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    cues: &'a [String],
    fillers: &'a [String],
}

impl Generator<'_> {
    fn filler(&self, rng: &mut SeededRng) -> String {
        self.fillers.choose(rng).expect("non-empty filler set").clone()
    }

    fn sentence(&self, rng: &mut SeededRng) -> LabeledSentence {
        let cfg = self.cfg;
        let positive = rng.gen_bool(cfg.positive_rate);
        let min_len = if positive && cfg.variant == CueVariant::Paired {
            cfg.min_length.max(2)
        } else {
            cfg.min_length
        };
        let len = rng.gen_range(min_len..=cfg.max_length);
        let mut words: Vec<String> = (0..len).map(|_| self.filler(rng)).collect();
        let mut labels = vec![false; len];
        match (cfg.variant, positive) {
            (CueVariant::Single, true) => {
                let k = rng.gen_range(1..=cfg.max_cues.min(len));
                for pos in index::sample(rng, len, k) {
                    words[pos] = self.cues.choose(rng).expect("cues").clone();
                    labels[pos] = true;
                }
            }
            (CueVariant::Paired, true) => {
                let pair = rng.gen_range(0..self.cues.len() / 2);
                let mut pos = index::sample(rng, len, 2).into_vec();
                pos.sort_unstable();
                words[pos[0]] = self.cues[2 * pair].clone();
                words[pos[1]] = self.cues[2 * pair + 1].clone();
                labels[pos[0]] = true;
                labels[pos[1]] = true;
            }
            (CueVariant::Paired, false) if !self.cues.is_empty() && rng.gen_bool(0.5) => {
                // a lone half is not a cue
                let pos = rng.gen_range(0..len);
                words[pos] = self.cues.choose(rng).expect("cues").clone();
            }
            _ => {}
        }
        LabeledSentence {
            words,
            sentence_label: positive,
            token_labels: Some(labels),
        }
    }
}

/// Generates disjoint train/dev/test splits. Deterministic per seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticSplits, DataError> {
    cfg.validate()?;
    let mut rng = derive(cfg.seed, 0x5EED);
    let words = pseudo_words(cfg.vocab_size, &mut rng);
    let (cues, fillers) = words.split_at(cfg.cue_lexicon_size);
    let gen = Generator { cfg, cues, fillers };

    let total = cfg.n_train + cfg.n_dev + cfg.n_test;
    let mut seen: HashSet<Vec<String>> = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let max_attempts = 50 * total + 1000;
    let mut attempts = 0;
    while all.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DataError::Config(format!(
                "could not draw {total} distinct sentences; enlarge the vocabulary or lengths"
            )));
        }
        let s = gen.sentence(&mut rng);
        if seen.insert(s.words.clone()) {
            all.push(s);
        }
    }
    let test = all.split_off(cfg.n_train + cfg.n_dev);
    let dev = all.split_off(cfg.n_train);
    Ok(SyntheticSplits {
        train: Dataset::new(all),
        dev: Dataset::new(dev),
        test: Dataset::new(test),
        cues: cues.to_vec(),
    })
}
