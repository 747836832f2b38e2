//! Per-word importance scores and their line-oriented text format.
//!
//! ```text
//! # method=weighted-soft
//! # threshold=0.5
//!
//! # sent_prob=0.93
//! the<TAB>0.04<TAB>0
//! may<TAB>0.91<TAB>1
//! ```
//!
//! Lines of the form `# key=value` before the first sentence describe the whole
//! file; `# sent_prob=` inside a block belongs to that sentence.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Tokenized;
use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Soft,
    WeightedSoft,
    Head,
    Lime,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Random,
        Method::Lime,
        Method::Head,
        Method::Soft,
        Method::WeightedSoft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Soft => "soft",
            Method::WeightedSoft => "weighted-soft",
            Method::Head => "head",
            Method::Lime => "lime",
            Method::Random => "random",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Soft => "Soft attention",
            Method::WeightedSoft => "Weighted soft attention",
            Method::Head => "Attention heads",
            Method::Lime => "LIME",
            Method::Random => "Random baseline",
        }
    }

    /// Default decision threshold when no tuning is performed.
    pub fn default_threshold(self) -> f64 {
        0.5
    }

    /// Dev-tuned thresholds reported for full-size models on three corpora.
    pub fn reference_threshold(self, corpus: ReferenceCorpus) -> f64 {
        use ReferenceCorpus::*;
        match (self, corpus) {
            (Method::Lime, Conll2010) => 0.2,
            (Method::Lime, Fce) => 0.001,
            (Method::Lime, Bea2019) => 0.01,
            (Method::Head, Conll2010) => 0.32,
            (Method::Head, Fce | Bea2019) => 0.08,
            _ => 0.5,
        }
    }
}

/// Corpora with published reference thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceCorpus {
    Conll2010,
    Fce,
    Bea2019,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// How subword scores combine into one word score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    First,
}

/// Collapses per-token scores onto words. Words cut off by truncation score 0.
pub fn aggregate_to_words(
    token_scores: &[f64],
    tok: &Tokenized,
    agg: Aggregation,
) -> Result<Vec<f64>, ModelError> {
    if token_scores.len() != tok.alignment.len() {
        return Err(ModelError::Alignment(format!(
            "{} token scores for {} aligned tokens",
            token_scores.len(),
            tok.alignment.len()
        )));
    }
    let covered = tok.words_covered();
    let mut acc: Vec<Option<(f64, usize)>> = vec![None; covered];
    for (&w, &s) in tok.alignment.iter().zip(token_scores) {
        let slot = acc
            .get_mut(w)
            .ok_or_else(|| ModelError::Alignment(format!("token aligned to word {w} beyond {covered}")))?;
        *slot = Some(match (*slot, agg) {
            (None, _) => (s, 1),
            (Some((m, n)), Aggregation::Max) => (m.max(s), n + 1),
            (Some((m, n)), Aggregation::Mean) => (m + s, n + 1),
            (Some((m, n)), Aggregation::First) => (m, n + 1),
        });
    }
    let mut words = Vec::with_capacity(tok.n_words);
    for (w, slot) in acc.into_iter().enumerate() {
        let (v, n) = slot.ok_or_else(|| ModelError::Alignment(format!("word {w} has no tokens")))?;
        words.push(if agg == Aggregation::Mean { v / n as f64 } else { v });
    }
    words.resize(tok.n_words.max(covered), 0.0);
    Ok(words)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    pub words: Vec<String>,
    pub scores: Vec<f64>,
    pub sentence_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub method: Method,
    pub threshold: f64,
    /// Extra file-level facts (seed, beta, selected head, disclosure flags).
    pub meta: BTreeMap<String, String>,
    pub sentences: Vec<SentenceScores>,
}

#[derive(Debug, Error)]
#[error("scores line {line}: {message}")]
pub struct ScoresParseError {
    pub line: usize,
    pub message: String,
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

impl ImportanceScores {
    pub fn new(method: Method, threshold: f64) -> Self {
        Self {
            method,
            threshold,
            meta: BTreeMap::new(),
            sentences: Vec::new(),
        }
    }

    /// Labels implied by the threshold: positive iff `score > threshold`.
    pub fn predictions(&self, sentence: usize) -> Vec<bool> {
        self.sentences[sentence]
            .scores
            .iter()
            .map(|&s| s > self.threshold)
            .collect()
    }

    pub fn seed(&self) -> Option<u64> {
        self.meta.get("seed").and_then(|s| s.parse().ok())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# method={}", self.method);
        let _ = writeln!(out, "# threshold={}", fmt_f64(self.threshold));
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        for s in &self.sentences {
            out.push('\n');
            if let Some(p) = s.sentence_prob {
                let _ = writeln!(out, "# sent_prob={}", fmt_f64(p));
            }
            for (w, &v) in s.words.iter().zip(&s.scores) {
                let _ = writeln!(out, "{w}\t{}\t{}", fmt_f64(v), u8::from(v > self.threshold));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ScoresParseError> {
        let err = |line: usize, message: String| ScoresParseError { line, message };
        let mut method = None;
        let mut threshold = None;
        let mut meta = BTreeMap::new();
        let mut sentences: Vec<SentenceScores> = Vec::new();
        let mut cur: Option<SentenceScores> = None;
        let mut pending_prob = None;

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                if let Some(s) = cur.take() {
                    sentences.push(s);
                }
                continue;
            }
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| err(n, format!("malformed header {line:?}")))?;
                match k {
                    "sent_prob" => {
                        if cur.is_some() {
                            return Err(err(n, "sent_prob after words".into()));
                        }
                        pending_prob =
                            Some(parse_f64(v).ok_or_else(|| err(n, format!("bad probability {v:?}")))?);
                    }
                    _ if !sentences.is_empty() || cur.is_some() => {
                        return Err(err(n, format!("file header {k:?} after the first sentence")))
                    }
                    "method" => method = Some(v.parse::<Method>().map_err(|e| err(n, e))?),
                    "threshold" => {
                        threshold = Some(parse_f64(v).ok_or_else(|| err(n, format!("bad threshold {v:?}")))?)
                    }
                    _ => {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(n, format!("expected 3 columns, found {}", fields.len())));
            }
            let score = parse_f64(fields[1]).ok_or_else(|| err(n, format!("bad score {:?}", fields[1])))?;
            let s = cur.get_or_insert_with(|| SentenceScores {
                words: Vec::new(),
                scores: Vec::new(),
                sentence_prob: pending_prob.take(),
            });
            s.words.push(fields[0].to_string());
            s.scores.push(score);
        }
        if let Some(s) = cur.take() {
            sentences.push(s);
        }
        Ok(Self {
            method: method.ok_or_else(|| err(0, "missing method header".into()))?,
            threshold: threshold.ok_or_else(|| err(0, "missing threshold header".into()))?,
            meta,
            sentences,
        })
    }
}
