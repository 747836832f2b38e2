//! AdamW training with linear warmup/decay, gradient clipping and best-dev
//! checkpoint selection.
//!
//! The trainer only ever sees [`TrainingExample`]s, which carry token ids and
//! the sentence label. Gold token labels cannot reach it.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::data::{tokenize, Dataset, SplitMode, Tokenized, Vocab};
use crate::encoder::Mode;
use crate::error::ModelError;
use crate::eval::sentence_prf;
use crate::model::{Model, ModelConfig};
use crate::rng::derive;
use crate::tensor::{Tensor, TensorError};

/// Named learning-rate presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small encoders trained from random initialisation.
    MicroScratch,
    /// The fine-tuning rate used for large pretrained encoders.
    PretrainedFinetune,
}

impl Profile {
    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::MicroScratch => 1e-3,
            Profile::PretrainedFinetune => 2e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::MicroScratch)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            eval_batch_size: 64,
            learning_rate: p.learning_rate(),
            warmup_ratio: 0.1,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
            max_grad_norm: 1.0,
            gamma: 0.1,
            beta: 2.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        let rates = [
            self.learning_rate,
            self.weight_decay,
            self.adam_epsilon,
            self.max_grad_norm,
            self.gamma,
        ];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return bad("rates must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// The only view of a sentence the trainer gets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub token_ids: Vec<usize>,
    pub sentence_label: bool,
}

/// Tokenizes a dataset for training, dropping gold token labels.
pub fn training_examples(ds: &Dataset, vocab: &Vocab, mode: SplitMode, max_len: usize) -> Vec<TrainingExample> {
    ds.sentences
        .iter()
        .map(|s| {
            let Tokenized { token_ids, .. } = tokenize(&s.words, vocab, mode, max_len);
            TrainingExample {
                token_ids,
                sentence_label: s.sentence_label,
            }
        })
        .collect()
}

/// Learning-rate multiplier at 1-based step `s` of `total` with `warmup` steps.
pub fn schedule_factor(s: usize, total: usize, warmup: usize) -> f64 {
    if s <= warmup {
        s as f64 / warmup as f64
    } else if total > warmup {
        total.saturating_sub(s) as f64 / (total - warmup) as f64
    } else {
        0.0
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

/// Adam with decoupled weight decay. Biases and layer-norm gains are not decayed.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            decay: store.iter().map(|(n, _)| decays(n)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.0;
            let g = grads.get(id).values();
            let m = self.m[i].values_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
            let v = self.v[i].values_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let wd = if self.decay[i] { lr * cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].values(), self.v[i].values());
            let p = store.get_mut(id).values_mut();
            for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                *p -= wd * *p;
                *p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        l1: f64,
        l2: Option<f64>,
        l3: Option<f64>,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        mean_l1: f64,
        mean_l2: Option<f64>,
        mean_l3: Option<f64>,
        dev_sentence_f1: f64,
        best: bool,
    },
}

pub fn write_log(records: &[LogRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub log: Vec<LogRecord>,
}

fn dev_f1(model: &Model, dev: &[TrainingExample], chunk: usize) -> Result<f64, ModelError> {
    let seqs: Vec<&[usize]> = dev.iter().map(|e| e.token_ids.as_slice()).collect();
    let gold: Vec<bool> = dev.iter().map(|e| e.sentence_label).collect();
    let probs = model.predict(&seqs, chunk)?;
    Ok(sentence_prf(&probs, &gold, 0.5)?.f1)
}

/// Trains from a fresh initialisation. `cfg.beta` and `cfg.gamma` override the
/// soft-attention head settings in `model_config`.
pub fn train_model(
    train: &[TrainingExample],
    dev: &[TrainingExample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(ModelError::Validation("train and dev sets must be non-empty".into()));
    }
    let mut mc = model_config.clone();
    mc.soft_attention.beta = cfg.beta;
    mc.soft_attention.gamma = cfg.gamma;
    let mut model = Model::init(&mc, cfg.seed)?;
    let mut opt = AdamW::new(model.params());
    let mut shuffle_rng = derive(cfg.seed, 0x5487);
    let mut dropout_rng = derive(cfg.seed, 0xD20);

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_ratio * total as f64).ceil() as usize;
    let norm = model.normalization();

    let mut log = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut has_aux = false;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| train[i].token_ids.as_slice()).collect();
            let labels: Vec<bool> = idx.iter().map(|&i| train[i].sentence_label).collect();
            let mut g = Graph::new();
            let diverged = |e: ModelError| match e {
                ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::Divergence { step },
                e => e,
            };
            let fwd = model
                .forward_batch(&mut g, &seqs, &mut Mode::Train(&mut dropout_rng), norm)
                .map_err(diverged)?;
            let (loss, parts) = model.loss(&mut g, &fwd, &labels).map_err(diverged)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(ModelError::Divergence { step });
            }
            let part = |k: usize| parts[k].map(|v| g.value(v).item());
            let mut grads = g.backward(loss, model.params())?;
            if !grads.all_finite() {
                return Err(ModelError::Divergence { step });
            }
            let grad_norm = grads.global_norm();
            if cfg.max_grad_norm > 0.0 && grad_norm > cfg.max_grad_norm {
                grads.scale(cfg.max_grad_norm / grad_norm);
            }
            let lr = cfg.learning_rate * schedule_factor(step, total, warmup);
            opt.step(model.params_mut(), &grads, lr, cfg);

            let (l1, l2, l3) = (part(0).unwrap_or(value), part(1), part(2));
            has_aux = l2.is_some();
            sums[0] += value;
            sums[1] += l1;
            sums[2] += l2.unwrap_or(0.0);
            sums[3] += l3.unwrap_or(0.0);
            log.push(LogRecord::Step {
                step,
                epoch,
                lr,
                loss: value,
                l1,
                l2,
                l3,
                grad_norm,
            });
        }
        let f1 = dev_f1(&model, dev, cfg.eval_batch_size)?;
        let improved = best.as_ref().map_or(true, |b| f1 > b.2);
        if improved {
            best = Some((model.clone(), epoch, f1));
        }
        let n = per_epoch as f64;
        log.push(LogRecord::Epoch {
            epoch,
            mean_loss: sums[0] / n,
            mean_l1: sums[1] / n,
            mean_l2: has_aux.then(|| sums[2] / n),
            mean_l3: has_aux.then(|| sums[3] / n),
            dev_sentence_f1: f1,
            best: improved,
        });
        log::info!("epoch {epoch}: loss {:.4}, dev sentence F1 {f1:.4}", sums[0] / n);
    }
    let (model, best_epoch, best_dev_f1) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_dev_f1,
        log,
    })
}
