//! Browser demo: sharpen attention weights, train a tiny soft attention
//! classifier on the synthetic cue corpus and shade sentences by word score,
//! and compute average precision for a hand-entered ranking.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use zeroshot::data::{generate_synthetic, Dataset, LabeledSentence, SplitMode, SyntheticConfig};
use zeroshot::encoder::EncoderConfig;
use zeroshot::eval::{average_precision, evaluate};
use zeroshot::heatmap::render_html;
use zeroshot::model::ModelConfig;
use zeroshot::pipeline::{train_checkpoint, Scorer};
use zeroshot::scores::{Aggregation, ImportanceScores, Method};
use zeroshot::softattn::{normalize_weights, Normalization};
use zeroshot::train::TrainConfig;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Sum-normalised `ã^β`, as used for the sentence representation.
pub fn sharpen_weights(a_tilde: &[f64], beta: f64) -> Result<Vec<f64>, String> {
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(format!("beta must be >= 1, got {beta}"));
    }
    if a_tilde.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err("attention values must lie in [0, 1]".into());
    }
    Ok(normalize_weights(a_tilde, Normalization::Sharpened { beta, epsilon: 1e-8 }))
}

#[wasm_bindgen]
pub fn sharpen(a_tilde: Vec<f64>, beta: f64) -> Result<Vec<f64>, JsError> {
    sharpen_weights(&a_tilde, beta).map_err(js_err)
}

/// Average precision of the ranking induced by `scores`; `None` when no word is gold.
#[wasm_bindgen]
pub fn ranking_ap(scores: Vec<f64>, gold: Vec<u8>) -> Result<Option<f64>, JsError> {
    if scores.len() != gold.len() {
        return Err(js_err(format!("{} scores for {} labels", scores.len(), gold.len())));
    }
    let gold: Vec<bool> = gold.iter().map(|&g| g != 0).collect();
    Ok(average_precision(&scores, &gold))
}

#[derive(Serialize)]
struct Summary {
    best_epoch: usize,
    dev_sentence_f1: f64,
    test_sentence_f1: Option<f64>,
    test_map: f64,
    cues: Vec<String>,
    examples: Vec<String>,
}

#[wasm_bindgen]
pub struct DemoModel {
    scorer: Scorer,
    beta: f64,
    summary: String,
}

#[wasm_bindgen]
impl DemoModel {
    /// Trains on a small synthetic corpus; takes a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, beta: f64, epochs: usize) -> Result<DemoModel, JsError> {
        Self::train(seed, beta, epochs).map_err(js_err)
    }

    fn train(seed: u64, beta: f64, epochs: usize) -> Result<DemoModel, String> {
        let data = generate_synthetic(&SyntheticConfig {
            n_train: 400,
            n_dev: 60,
            n_test: 60,
            vocab_size: 60,
            cue_lexicon_size: 6,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let mc = ModelConfig {
            encoder: EncoderConfig {
                max_seq_len: 48,
                num_layers: 1,
                num_heads: 2,
                model_dim: 16,
                ffn_dim: 32,
                ..Default::default()
            },
            attn_layer_size: 16,
            attn_hidden_size: 16,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs,
            beta,
            seed,
            ..Default::default()
        };
        let split = SplitMode::default();
        let run = train_checkpoint(&data.train, &data.dev, split, &mc, &tc).map_err(|e| e.to_string())?;
        let scorer = Scorer::new(run.checkpoint).map_err(|e| e.to_string())?;
        let scores = scorer
            .soft(&data.test, Method::WeightedSoft, Some(beta), Aggregation::Max)
            .map_err(|e| e.to_string())?;
        let report = evaluate(&scores, &data.test).map_err(|e| e.to_string())?;
        let summary = Summary {
            best_epoch: run.best_epoch,
            dev_sentence_f1: run.best_dev_f1,
            test_sentence_f1: report.sentence.map(|s| s.f1),
            test_map: report.map,
            cues: data.cues.clone(),
            examples: data.test.sentences.iter().take(4).map(|s| s.words.join(" ")).collect(),
        };
        Ok(DemoModel {
            scorer,
            beta,
            summary: serde_json::to_string(&summary).map_err(|e| e.to_string())?,
        })
    }

    /// JSON with training and test metrics, the cue words and example sentences.
    pub fn summary(&self) -> String {
        self.summary.clone()
    }

    fn score(&self, text: &str) -> Result<ImportanceScores, String> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err("enter at least one word".into());
        }
        let n = words.len();
        let ds = Dataset::new(vec![LabeledSentence::new(words, vec![false; n])]);
        self.scorer
            .soft(&ds, Method::WeightedSoft, Some(self.beta), Aggregation::Max)
            .map_err(|e| e.to_string())
    }

    /// Word scores (`ã`) and sentence probability as JSON.
    pub fn score_json(&self, text: &str) -> Result<String, JsError> {
        let s = self.score(text).map_err(js_err)?;
        let sent = &s.sentences[0];
        serde_json::to_string(&serde_json::json!({
            "words": sent.words,
            "scores": sent.scores,
            "probability": sent.sentence_prob,
        }))
        .map_err(js_err)
    }

    /// Heatmap page fragment for one sentence.
    pub fn heatmap(&self, text: &str) -> Result<String, JsError> {
        let s = self.score(text).map_err(js_err)?;
        let page = render_html(&[s]).map_err(js_err)?;
        Ok(body_of(&page).to_string())
    }
}

fn body_of(page: &str) -> &str {
    let start = page.find("<body>").map_or(0, |i| i + "<body>".len());
    let end = page.rfind("</body>").unwrap_or(page.len());
    &page[start..end]
}
