//! End-to-end steps shared by the command line, tests and the browser demo:
//! train a checkpoint from datasets, then score sentences with any method.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TokenizerConfig};
use crate::data::{Dataset, SplitMode, Tokenized, Vocab};
use crate::error::ModelError;
use crate::eval::{evaluate, random_baseline, MetricsReport};
use crate::headscore::{head_token_scores, select_best_head, tune_threshold, HeadId, QueryRows};
use crate::lime::{lime_scores, LimeConfig};
use crate::model::{Model, ModelConfig};
use crate::scores::{Aggregation, ImportanceScores, Method, SentenceScores};
use crate::softattn::Normalization;
use crate::train::{train_model, training_examples, LogRecord, TrainConfig};

pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Builds the vocabulary from `train`, trains, and packages the best epoch.
/// Only words and sentence labels of `train` and `dev` are read.
pub fn train_checkpoint(
    train: &Dataset,
    dev: &Dataset,
    split: SplitMode,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedRun, ModelError> {
    let vocab = train.build_vocab(split);
    let mut mc = model_config.clone();
    mc.encoder.vocab_size = vocab.len();
    let max_len = mc.encoder.max_seq_len;
    let tr = training_examples(train, &vocab, split, max_len);
    let dv = training_examples(dev, &vocab, split, max_len);
    let out = train_model(&tr, &dv, &mc, cfg)?;
    let mut checkpoint = Checkpoint::new(&out.model, TokenizerConfig::new(split, max_len, &vocab));
    checkpoint.meta.insert("seed".into(), cfg.seed.to_string());
    checkpoint.meta.insert("best_epoch".into(), out.best_epoch.to_string());
    checkpoint
        .meta
        .insert("best_dev_sentence_f1".into(), format!("{:?}", out.best_dev_f1));
    Ok(TrainedRun {
        checkpoint,
        log: out.log,
        best_epoch: out.best_epoch,
        best_dev_f1: out.best_dev_f1,
    })
}

/// Options for attention-head scoring.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadOptions {
    /// Fixed head; selected by dev MAP when absent.
    pub head: Option<HeadId>,
    pub query_rows: QueryRows,
    pub aggregation: Aggregation,
}

/// A loaded checkpoint ready to score datasets.
pub struct Scorer {
    checkpoint: Checkpoint,
    model: Model,
    vocab: Vocab,
}

impl Scorer {
    pub fn new(checkpoint: Checkpoint) -> Result<Self, ModelError> {
        let model = checkpoint.build_model()?;
        let vocab = checkpoint.tokenizer.vocab();
        Ok(Self {
            checkpoint,
            model,
            vocab,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn tokenize(&self, ds: &Dataset) -> Vec<Tokenized> {
        ds.sentences
            .iter()
            .map(|s| self.checkpoint.tokenize(&self.vocab, &s.words))
            .collect()
    }

    fn seed_meta(&self, out: &mut ImportanceScores) {
        if let Some(seed) = self.checkpoint.meta.get("seed") {
            out.meta.insert("seed".into(), seed.clone());
        }
    }

    /// Sentence probabilities under the checkpoint's own normalisation.
    pub fn sentence_probs(&self, ds: &Dataset) -> Result<Vec<f64>, ModelError> {
        let toks = self.tokenize(ds);
        let seqs: Vec<&[usize]> = toks.iter().map(|t| t.token_ids.as_slice()).collect();
        self.model.predict(&seqs, 64)
    }

    /// `ã` word scores with threshold 0.5. `soft` uses β = 1; `weighted-soft`
    /// uses `beta` or the checkpoint's trained value.
    pub fn soft(
        &self,
        ds: &Dataset,
        method: Method,
        beta: Option<f64>,
        agg: Aggregation,
    ) -> Result<ImportanceScores, ModelError> {
        if !self.model.is_soft() {
            return Err(ModelError::Config("checkpoint has no soft attention head".into()));
        }
        let head = &self.model.config().soft_attention;
        let beta = match method {
            Method::Soft => 1.0,
            Method::WeightedSoft => beta.unwrap_or(head.beta),
            m => return Err(ModelError::Config(format!("{m} is not a soft attention method"))),
        };
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(ModelError::Config(format!("beta {beta} must be >= 1")));
        }
        let norm = Normalization::Sharpened {
            beta,
            epsilon: head.norm_epsilon,
        };
        let mut out = ImportanceScores::new(method, method.default_threshold());
        self.seed_meta(&mut out);
        out.meta.insert("beta".into(), format!("{beta:?}"));
        for (s, tok) in ds.sentences.iter().zip(self.tokenize(ds)) {
            let a = self.model.analyze(&tok.token_ids, norm)?;
            let f = a.soft.expect("soft head");
            out.sentences.push(SentenceScores {
                words: s.words.clone(),
                scores: f.token_scores(&tok, agg)?,
                sentence_prob: Some(a.probability),
            });
        }
        Ok(out)
    }

    fn head_scores(
        &self,
        ds: &Dataset,
        head: HeadId,
        opts: &HeadOptions,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
        let norm = self.model.normalization();
        let mut scores = Vec::with_capacity(ds.len());
        let mut probs = Vec::with_capacity(ds.len());
        for tok in self.tokenize(ds) {
            let a = self.model.analyze(&tok.token_ids, norm)?;
            scores.push(head_token_scores(&a.encoder, head, &tok, opts.query_rows, opts.aggregation)?);
            probs.push(a.probability);
        }
        Ok((scores, probs))
    }

    /// Attention-head scores. Head selection (when no head is fixed) and
    /// threshold tuning (when no threshold is given) read `dev` token labels;
    /// the output records which of them did.
    pub fn head(
        &self,
        ds: &Dataset,
        dev: Option<&Dataset>,
        opts: &HeadOptions,
        threshold: Option<f64>,
    ) -> Result<ImportanceScores, ModelError> {
        let need_dev = || {
            dev.ok_or_else(|| ModelError::Validation("head scoring needs a dev set or both --head and --threshold".into()))
        };
        let mut out = ImportanceScores::new(Method::Head, 0.5);
        self.seed_meta(&mut out);
        let mut disclosed = Vec::new();
        let head = match opts.head {
            Some(h) => h,
            None => {
                let dev = need_dev()?;
                let norm = self.model.normalization();
                let items = self
                    .tokenize(dev)
                    .into_iter()
                    .map(|t| Ok((self.model.analyze(&t.token_ids, norm)?.encoder, t)))
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let gold: Vec<Option<Vec<bool>>> = dev.sentences.iter().map(|s| s.token_labels.clone()).collect();
                let sel = select_best_head(&items, &gold, opts.query_rows, opts.aggregation)?;
                out.meta.insert("dev_map".into(), format!("{:?}", sel.dev_map));
                disclosed.push("head-selection");
                sel.head
            }
        };
        out.meta.insert("head".into(), head.to_string());
        out.threshold = match threshold {
            Some(t) => t,
            None => {
                let dev = need_dev()?;
                let (scores, _) = self.head_scores(dev, head, opts)?;
                let choice = tune_dev_threshold(&scores, dev)?;
                disclosed.push("threshold");
                if choice.no_positives {
                    out.meta.insert("warning".into(), "dev set has no positive tokens".into());
                }
                choice.threshold
            }
        };
        if !disclosed.is_empty() {
            out.meta.insert("gold_token_labels_used".into(), format!("dev:{}", disclosed.join("+")));
        }
        let (scores, probs) = self.head_scores(ds, head, opts)?;
        out.sentences = ds
            .sentences
            .iter()
            .zip(scores)
            .zip(probs)
            .map(|((s, scores), p)| SentenceScores {
                words: s.words.clone(),
                scores,
                sentence_prob: Some(p),
            })
            .collect();
        Ok(out)
    }

    fn lime_raw(&self, ds: &Dataset, cfg: &LimeConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
        let toks = self.tokenize(ds);
        let mut scores = Vec::with_capacity(ds.len());
        for (i, tok) in toks.iter().enumerate() {
            scores.push(lime_scores(&self.model, tok, cfg, i as u64)?.weights);
        }
        let seqs: Vec<&[usize]> = toks.iter().map(|t| t.token_ids.as_slice()).collect();
        let probs = self.model.predict(&seqs, 64)?;
        Ok((scores, probs))
    }

    /// LIME explanation weights. Without a threshold it is tuned on `dev`.
    pub fn lime(
        &self,
        ds: &Dataset,
        dev: Option<&Dataset>,
        cfg: &LimeConfig,
        threshold: Option<f64>,
    ) -> Result<ImportanceScores, ModelError> {
        let mut out = ImportanceScores::new(Method::Lime, 0.5);
        self.seed_meta(&mut out);
        out.meta.insert("lime_seed".into(), cfg.seed.to_string());
        out.meta.insert("n_samples".into(), cfg.n_samples.to_string());
        out.threshold = match threshold {
            Some(t) => t,
            None => {
                let dev = dev.ok_or_else(|| ModelError::Validation("LIME needs a dev set or --threshold".into()))?;
                let (scores, _) = self.lime_raw(dev, cfg)?;
                let choice = tune_dev_threshold(&scores, dev)?;
                out.meta.insert("gold_token_labels_used".into(), "dev:threshold".into());
                if choice.no_positives {
                    out.meta.insert("warning".into(), "dev set has no positive tokens".into());
                }
                choice.threshold
            }
        };
        let (scores, probs) = self.lime_raw(ds, cfg)?;
        out.sentences = ds
            .sentences
            .iter()
            .zip(scores)
            .zip(probs)
            .map(|((s, scores), p)| SentenceScores {
                words: s.words.clone(),
                scores,
                sentence_prob: Some(p),
            })
            .collect();
        Ok(out)
    }

    /// Uniform random scores, with this checkpoint's sentence probabilities.
    pub fn random(&self, ds: &Dataset, seed: u64) -> Result<ImportanceScores, ModelError> {
        let mut out = random_baseline(ds, seed);
        for (s, p) in out.sentences.iter_mut().zip(self.sentence_probs(ds)?) {
            s.sentence_prob = Some(p);
        }
        Ok(out)
    }
}

fn tune_dev_threshold(scores: &[Vec<f64>], dev: &Dataset) -> Result<crate::headscore::ThresholdChoice, ModelError> {
    let gold = dev
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.token_labels
                .clone()
                .ok_or_else(|| ModelError::Validation(format!("dev sentence {i} lacks token labels")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    tune_threshold(scores, &gold)
}

/// One trained model in a β sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub seed: u64,
    pub dev_sentence_f1: f64,
    pub dev_map: f64,
}

/// Trains one model per (β, seed) and scores the dev set with weighted soft
/// attention at that β.
pub fn sweep(
    train: &Dataset,
    dev: &Dataset,
    split: SplitMode,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    betas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, ModelError> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(ModelError::Config("sweep needs at least one beta and one seed".into()));
    }
    let mut rows = Vec::new();
    for &beta in betas {
        for &seed in seeds {
            let c = TrainConfig { beta, seed, ..cfg.clone() };
            let run = train_checkpoint(train, dev, split, model_config, &c)?;
            let scorer = Scorer::new(run.checkpoint)?;
            let scores = scorer.soft(dev, Method::WeightedSoft, Some(beta), Aggregation::Max)?;
            let report: MetricsReport = evaluate(&scores, dev)?;
            rows.push(SweepRow {
                beta,
                seed,
                dev_sentence_f1: report.sentence.map_or(0.0, |s| s.f1),
                dev_map: report.map,
            });
        }
    }
    Ok(rows)
}

/// Mean dev MAP and sentence F1 per β, in grid order.
pub fn sweep_summary(rows: &[SweepRow]) -> Vec<(f64, f64, f64)> {
    let mut betas: Vec<f64> = Vec::new();
    for r in rows {
        if !betas.contains(&r.beta) {
            betas.push(r.beta);
        }
    }
    betas
        .into_iter()
        .map(|b| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.beta == b).collect();
            let n = sel.len() as f64;
            (
                b,
                sel.iter().map(|r| r.dev_map).sum::<f64>() / n,
                sel.iter().map(|r| r.dev_sentence_f1).sum::<f64>() / n,
            )
        })
        .collect()
}
