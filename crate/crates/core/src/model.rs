//! Encoder plus a sentence-classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamStore, Var};
use crate::encoder::{EncodedBatch, Encoder, EncoderConfig, EncoderOutput, Mode};
use crate::error::ModelError;
use crate::rng::derive;
use crate::softattn::{HeadConfig, LossComponents, Normalization, SoftAttentionHead, SoftAttnForward, SoftGraph};
use crate::tensor::{glorot_with, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Linear layer plus sigmoid on the final CLS embedding.
    Cls,
    #[default]
    SoftAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub soft_attention: HeadConfig,
    pub attn_layer_size: usize,
    pub attn_hidden_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadKind::SoftAttention,
            soft_attention: HeadConfig::default(),
            attn_layer_size: 100,
            attn_hidden_size: 300,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.soft_attention.validate()?;
        if self.attn_layer_size == 0 || self.attn_hidden_size == 0 {
            return Err(ModelError::Config("soft attention sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Head {
    Cls { weight: ParamId, bias: ParamId },
    Soft(SoftAttentionHead),
}

/// Probability from the CLS embedding: `σ(w · T_0 + b)`.
pub fn classify_cls(output: &EncoderOutput, weight: &Tensor, bias: f64) -> Result<f64, ModelError> {
    let t0 = output.token_embeddings.row_slice(0);
    if weight.len() != t0.len() {
        return Err(ModelError::Config(format!(
            "CLS head has {} weights for a {}-dim embedding",
            weight.len(),
            t0.len()
        )));
    }
    let z: f64 = t0.iter().zip(weight.values()).map(|(a, b)| a * b).sum::<f64>() + bias;
    Ok(sigmoid(z))
}

/// Graph handles for one batch.
pub struct BatchForward {
    pub encoded: EncodedBatch,
    pub logits: Var,
    pub probs: Var,
    pub soft: Option<SoftGraph>,
}

/// Plain values for one sentence.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub encoder: EncoderOutput,
    pub soft: Option<SoftAttnForward>,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    head: Head,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = derive(seed, 0x1417);
        let mut store = ParamStore::new();
        Encoder::init(&config.encoder, &mut store, &mut rng)?;
        let d = config.encoder.model_dim;
        match config.head {
            HeadKind::Cls => {
                store.insert("cls.weight", glorot_with(&[d, 1], &mut rng)?);
                store.insert("cls.bias", Tensor::zeros(&[1, 1]));
            }
            HeadKind::SoftAttention => {
                SoftAttentionHead::init(
                    &mut store,
                    d,
                    config.attn_layer_size,
                    config.attn_hidden_size,
                    &mut rng,
                )?;
            }
        }
        Self::from_parts(config.clone(), store)
    }

    /// Wraps an existing parameter set, checking every expected tensor.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = Encoder::bind(&config.encoder, &store)?;
        let d = config.encoder.model_dim;
        let head = match config.head {
            HeadKind::Cls => {
                let get = |n: &str, shape: [usize; 2]| {
                    let id = store.id(n).ok_or_else(|| ModelError::MissingParam(n.into()))?;
                    if store.get(id).shape() != shape {
                        return Err(ModelError::Config(format!("{n} must have shape {shape:?}")));
                    }
                    Ok(id)
                };
                Head::Cls {
                    weight: get("cls.weight", [d, 1])?,
                    bias: get("cls.bias", [1, 1])?,
                }
            }
            HeadKind::SoftAttention => Head::Soft(SoftAttentionHead::bind(
                &store,
                d,
                config.attn_layer_size,
                config.attn_hidden_size,
            )?),
        };
        let expected = store.len();
        let used = 4 + 12 * config.encoder.num_layers + if matches!(head, Head::Cls { .. }) { 2 } else { 8 };
        if expected != used {
            return Err(ModelError::Config(format!(
                "parameter set has {expected} tensors, model uses {used}"
            )));
        }
        Ok(Self {
            config,
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.store)
    }

    pub fn is_soft(&self) -> bool {
        matches!(self.head, Head::Soft(_))
    }

    /// The normalisation implied by the configured sharpening exponent.
    pub fn normalization(&self) -> Normalization {
        (&self.config.soft_attention).into()
    }

    pub fn forward_batch(
        &self,
        g: &mut Graph,
        batch: &[&[usize]],
        mode: &mut Mode<'_>,
        norm: Normalization,
    ) -> Result<BatchForward, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Validation("empty batch".into()));
        }
        let encoded = self.encoder.forward(g, &self.store, batch, mode, false)?;
        match &self.head {
            Head::Cls { weight, bias } => {
                let rows: Vec<Var> = encoded
                    .segments
                    .iter()
                    .map(|s| g.slice_rows(encoded.hidden, s.offset, 1))
                    .collect::<Result<_, _>>()?;
                let cls = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
                let w = g.param(&self.store, *weight);
                let b = g.param(&self.store, *bias);
                let z = g.matmul(cls, w)?;
                let logits = g.add(z, b)?;
                let probs = g.sigmoid(logits)?;
                Ok(BatchForward {
                    encoded,
                    logits,
                    probs,
                    soft: None,
                })
            }
            Head::Soft(head) => {
                let rows: Vec<(usize, usize)> = encoded
                    .segments
                    .iter()
                    .zip(&encoded.roles)
                    .map(|(s, r)| {
                        let n = r.iter().filter(|&&x| x == crate::encoder::TokenRole::Real).count();
                        (s.offset + 1, n)
                    })
                    .collect();
                let soft = head.forward_graph(g, &self.store, encoded.hidden, &rows, norm)?;
                Ok(BatchForward {
                    encoded,
                    logits: soft.logits,
                    probs: soft.probs,
                    soft: Some(soft),
                })
            }
        }
    }

    /// Training objective. The soft head adds `γ (L2 + L3)`; the CLS head
    /// uses cross-entropy alone.
    pub fn loss(
        &self,
        g: &mut Graph,
        fwd: &BatchForward,
        labels: &[bool],
    ) -> Result<(Var, [Option<Var>; 3]), ModelError> {
        match &fwd.soft {
            Some(soft) => {
                let lv = soft.joint_loss(g, labels, self.config.soft_attention.gamma)?;
                Ok((lv.total, [Some(lv.l1), Some(lv.l2), Some(lv.l3)]))
            }
            None => {
                let targets: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
                let l1 = g.bce_with_logits(fwd.logits, &targets)?;
                Ok((l1, [Some(l1), None, None]))
            }
        }
    }

    /// Sentence probabilities in eval mode, `chunk` sentences per graph.
    pub fn predict(&self, seqs: &[&[usize]], chunk: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let fwd = self.forward_batch(&mut g, part, &mut Mode::Eval, self.normalization())?;
            out.extend_from_slice(g.value(fwd.probs).values());
        }
        Ok(out)
    }

    /// Eval-mode pass over one sequence with attention maps retained.
    pub fn analyze(&self, token_ids: &[usize], norm: Normalization) -> Result<Analysis, ModelError> {
        let encoder = self.encoder.encode(&self.store, token_ids, &mut Mode::Eval)?;
        match &self.head {
            Head::Cls { weight, bias } => {
                let probability = classify_cls(&encoder, self.store.get(*weight), self.store.get(*bias).item())?;
                Ok(Analysis {
                    encoder,
                    soft: None,
                    probability,
                })
            }
            Head::Soft(head) => {
                let soft = head.forward(&self.store, &encoder, norm)?;
                Ok(Analysis {
                    probability: soft.y,
                    encoder,
                    soft: Some(soft),
                })
            }
        }
    }

    /// Loss components on plain values, for logging.
    pub fn evaluate_loss(&self, seqs: &[&[usize]], labels: &[bool]) -> Result<LossComponents, ModelError> {
        let mut g = Graph::new();
        let fwd = self.forward_batch(&mut g, seqs, &mut Mode::Eval, self.normalization())?;
        let (total, parts) = self.loss(&mut g, &fwd, labels)?;
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        Ok(LossComponents {
            total: g.value(total).item(),
            l1: v(parts[0]),
            l2: v(parts[1]),
            l3: v(parts[2]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, SEP};

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 20,
                max_seq_len: 12,
                num_layers: 1,
                num_heads: 2,
                model_dim: 8,
                ffn_dim: 16,
                dropout_prob: 0.1,
            },
            head,
            attn_layer_size: 5,
            attn_hidden_size: 6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_cls_head_gives_one_half() {
        let mut m = Model::init(&tiny(HeadKind::Cls), 1).unwrap();
        let id = m.params().id("cls.weight").unwrap();
        *m.params_mut().get_mut(id) = Tensor::zeros(&[8, 1]);
        let a = m.analyze(&[CLS, 7, 9, SEP], Normalization::Plain).unwrap();
        assert_eq!(a.probability, 0.5);
        let p = m.predict(&[&[CLS, 7, 9, SEP], &[CLS, 5, SEP]], 8).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn batch_and_single_agree() {
        let m = Model::init(&tiny(HeadKind::SoftAttention), 2).unwrap();
        let seqs: [&[usize]; 3] = [&[CLS, 7, 9, SEP], &[CLS, 5, SEP], &[CLS, 11, 12, 13, 6, SEP]];
        let batch = m.predict(&seqs, 8).unwrap();
        for (s, p) in seqs.iter().zip(batch) {
            let single = m.analyze(s, m.normalization()).unwrap();
            assert!((single.probability - p).abs() < 1e-12);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn from_parts_rejects_foreign_params() {
        let m = Model::init(&tiny(HeadKind::SoftAttention), 3).unwrap();
        let (cfg, mut store) = m.into_parts();
        assert!(Model::from_parts(ModelConfig { head: HeadKind::Cls, ..cfg.clone() }, store.clone()).is_err());
        store.insert("stray", Tensor::zeros(&[1, 1]));
        assert!(Model::from_parts(cfg, store).is_err());
    }
}
