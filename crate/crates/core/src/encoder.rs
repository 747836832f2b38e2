//! A small post-LN transformer encoder that keeps every attention map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::vocab::{CLS, PAD, SEP};
use crate::error::ModelError;
use crate::rng::SeededRng;
use crate::tensor::{glorot_with, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            max_seq_len: 128,
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            dropout_prob: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.vocab_size <= SEP || self.num_layers == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, num_layers and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return fail(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Forward-pass mode. Dropout only fires in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Cls,
    Real,
    Sep,
    Pad,
}

/// Roles for a `[CLS] real.. [SEP] [PAD]..` sequence.
pub fn token_roles(ids: &[usize]) -> Result<Vec<TokenRole>, ModelError> {
    if ids.first() != Some(&CLS) {
        return Err(ModelError::Contract("position 0 must hold the CLS token".into()));
    }
    let sep = ids
        .iter()
        .position(|&t| t == SEP)
        .ok_or_else(|| ModelError::Contract("sequence lacks a SEP token".into()))?;
    if ids[sep + 1..].iter().any(|&t| t != PAD) {
        return Err(ModelError::Contract("only padding may follow SEP".into()));
    }
    if ids[1..sep].iter().any(|&t| t == PAD || t == CLS) {
        return Err(ModelError::Contract("special token inside the sentence".into()));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, _)| match i {
            0 => TokenRole::Cls,
            i if i < sep => TokenRole::Real,
            i if i == sep => TokenRole::Sep,
            _ => TokenRole::Pad,
        })
        .collect())
}

/// Contextual embeddings and all attention maps for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `N × model_dim`.
    pub token_embeddings: Tensor,
    /// `[layer][head]`, each `N × N` and row-stochastic.
    pub attention_maps: Vec<Vec<Tensor>>,
    pub roles: Vec<TokenRole>,
}

impl EncoderOutput {
    /// Positions of real (non-special, non-padding) tokens.
    pub fn real_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::Real)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

/// Graph-level result for a ragged batch: sentence `s` occupies rows
/// `segments[s].offset ..+ len` of `hidden`.
pub struct EncodedBatch {
    pub hidden: Var,
    pub segments: Vec<Segment>,
    pub roles: Vec<Vec<TokenRole>>,
    /// `[sentence][layer][head]`, empty unless requested.
    pub attention: Vec<Vec<Vec<Tensor>>>,
}

#[derive(Clone, Debug)]
struct LayerParams {
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    attn_ln_g: ParamId,
    attn_ln_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ffn_ln_g: ParamId,
    ffn_ln_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, ModelError> {
    store.id(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

fn param_shapes(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.model_dim;
    let mut v = vec![
        ("encoder.embed.token".to_string(), vec![c.vocab_size, d]),
        ("encoder.embed.position".to_string(), vec![c.max_seq_len, d]),
        ("encoder.embed.ln.gain".to_string(), vec![1, d]),
        ("encoder.embed.ln.bias".to_string(), vec![1, d]),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("encoder.layer{l}.{s}");
        v.extend([
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![1, 3 * d]),
            (p("attn.out.weight"), vec![d, d]),
            (p("attn.out.bias"), vec![1, d]),
            (p("attn.ln.gain"), vec![1, d]),
            (p("attn.ln.bias"), vec![1, d]),
            (p("ffn.in.weight"), vec![d, c.ffn_dim]),
            (p("ffn.in.bias"), vec![1, c.ffn_dim]),
            (p("ffn.out.weight"), vec![c.ffn_dim, d]),
            (p("ffn.out.bias"), vec![1, d]),
            (p("ffn.ln.gain"), vec![1, d]),
            (p("ffn.ln.bias"), vec![1, d]),
        ]);
    }
    v
}

impl Encoder {
    /// Creates fresh parameters in `store`: Glorot weights and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn init(
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in param_shapes(config) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                glorot_with(&shape, rng)?
            };
            store.insert(name, t);
        }
        Self::bind(config, store)
    }

    /// Resolves parameter handles in an existing store, checking shapes.
    pub fn bind(config: &EncoderConfig, store: &ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in param_shapes(config) {
            let t = store
                .by_name(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = |s: &str| lookup(store, &format!("encoder.layer{l}.{s}"));
                Ok(LayerParams {
                    qkv_w: p("attn.qkv.weight")?,
                    qkv_b: p("attn.qkv.bias")?,
                    out_w: p("attn.out.weight")?,
                    out_b: p("attn.out.bias")?,
                    attn_ln_g: p("attn.ln.gain")?,
                    attn_ln_b: p("attn.ln.bias")?,
                    ffn_w1: p("ffn.in.weight")?,
                    ffn_b1: p("ffn.in.bias")?,
                    ffn_w2: p("ffn.out.weight")?,
                    ffn_b2: p("ffn.out.bias")?,
                    ffn_ln_g: p("ffn.ln.gain")?,
                    ffn_ln_b: p("ffn.ln.bias")?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            config: config.clone(),
            tok_emb: lookup(store, "encoder.embed.token")?,
            pos_emb: lookup(store, "encoder.embed.position")?,
            emb_ln_g: lookup(store, "encoder.embed.ln.gain")?,
            emb_ln_b: lookup(store, "encoder.embed.ln.bias")?,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes a ragged batch of `[CLS] .. [SEP] [PAD]*` sequences on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&[usize]],
        mode: &mut Mode<'_>,
        capture_attention: bool,
    ) -> Result<EncodedBatch, ModelError> {
        let c = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        let mut roles = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.len() > c.max_seq_len {
                return Err(ModelError::Length {
                    len: seq.len(),
                    max: c.max_seq_len,
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= c.vocab_size) {
                return Err(ModelError::Index(format!(
                    "token id {bad} outside vocabulary of {}",
                    c.vocab_size
                )));
            }
            roles.push(token_roles(seq)?);
            segments.push(Segment {
                offset: ids.len(),
                len: seq.len(),
            });
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
        }
        let keys: Vec<Vec<bool>> = roles
            .iter()
            .map(|r| r.iter().map(|&x| x != TokenRole::Pad).collect())
            .collect();

        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let x = g.gather_rows(tok, &ids)?;
        let p = g.gather_rows(pos, &positions)?;
        let h = g.add(x, p)?;
        let (lg, lb) = (g.param(store, self.emb_ln_g), g.param(store, self.emb_ln_b));
        let mut h = g.layer_norm(h, lg, lb, LN_EPS)?;

        let d = c.model_dim;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention: Vec<Vec<Vec<Tensor>>> = if capture_attention {
            vec![Vec::with_capacity(c.num_layers); batch.len()]
        } else {
            Vec::new()
        };

        for lp in &self.layers {
            let w = g.param(store, lp.qkv_w);
            let b = g.param(store, lp.qkv_b);
            let qkv = g.matmul(h, w)?;
            let qkv = g.add(qkv, b)?;
            let mut per_sentence = Vec::with_capacity(batch.len());
            for (s, seg) in segments.iter().enumerate() {
                let mut heads = Vec::with_capacity(c.num_heads);
                let mut maps = Vec::new();
                for hd in 0..c.num_heads {
                    let q = g.slice(qkv, seg.offset, seg.len, hd * dh, dh)?;
                    let k = g.slice(qkv, seg.offset, seg.len, d + hd * dh, dh)?;
                    let v = g.slice(qkv, seg.offset, seg.len, 2 * d + hd * dh, dh)?;
                    let kt = g.transpose(k)?;
                    let scores = g.matmul(q, kt)?;
                    let scores = g.scale(scores, scale);
                    let probs = g.softmax_rows(scores, Some(&keys[s]))?;
                    if capture_attention {
                        maps.push(g.value(probs).clone());
                    }
                    let probs = match mode {
                        Mode::Train(rng) => g.dropout(probs, c.dropout_prob, &mut **rng),
                        Mode::Eval => probs,
                    };
                    heads.push(g.matmul(probs, v)?);
                }
                if capture_attention {
                    attention[s].push(maps);
                }
                per_sentence.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    g.concat_cols(&heads)?
                });
            }
            let ctx = if per_sentence.len() == 1 {
                per_sentence[0]
            } else {
                g.concat_rows(&per_sentence)?
            };
            let ow = g.param(store, lp.out_w);
            let ob = g.param(store, lp.out_b);
            let o = g.matmul(ctx, ow)?;
            let o = g.add(o, ob)?;
            let r = g.add(h, o)?;
            let (lg, lb) = (g.param(store, lp.attn_ln_g), g.param(store, lp.attn_ln_b));
            h = g.layer_norm(r, lg, lb, LN_EPS)?;

            let w1 = g.param(store, lp.ffn_w1);
            let b1 = g.param(store, lp.ffn_b1);
            let f = g.matmul(h, w1)?;
            let f = g.add(f, b1)?;
            let f = g.gelu(f)?;
            let f = match mode {
                Mode::Train(rng) => g.dropout(f, c.dropout_prob, &mut **rng),
                Mode::Eval => f,
            };
            let w2 = g.param(store, lp.ffn_w2);
            let b2 = g.param(store, lp.ffn_b2);
            let f = g.matmul(f, w2)?;
            let f = g.add(f, b2)?;
            let r = g.add(h, f)?;
            let (lg, lb) = (g.param(store, lp.ffn_ln_g), g.param(store, lp.ffn_ln_b));
            h = g.layer_norm(r, lg, lb, LN_EPS)?;
        }
        Ok(EncodedBatch {
            hidden: h,
            segments,
            roles,
            attention,
        })
    }

    /// Encodes one sequence and returns plain values.
    pub fn encode(
        &self,
        store: &ParamStore,
        token_ids: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutput, ModelError> {
        let mut g = Graph::new();
        let mut out = self.forward(&mut g, store, &[token_ids], mode, true)?;
        Ok(EncoderOutput {
            token_embeddings: g.value(out.hidden).clone(),
            attention_maps: out.attention.pop().unwrap_or_default(),
            roles: out.roles.pop().unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> (Encoder, ParamStore) {
        let cfg = EncoderConfig {
            vocab_size: 20,
            max_seq_len: 12,
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            dropout_prob: 0.1,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, &mut store, &mut seeded(1)).unwrap();
        (enc, store)
    }

    fn rows_stochastic(out: &EncoderOutput) {
        for layer in &out.attention_maps {
            for map in layer {
                let (r, c) = map.dims().unwrap();
                assert_eq!(r, c);
                for i in 0..r {
                    let s: f64 = map.row_slice(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_a_distribution() {
        let (enc, store) = tiny();
        let out = enc.encode(&store, &[CLS, 7, SEP], &mut Mode::Eval).unwrap();
        assert_eq!(out.attention_maps.len(), 2);
        assert_eq!(out.attention_maps[0].len(), 2);
        rows_stochastic(&out);
        assert_eq!(out.real_positions(), vec![1]);
    }

    #[test]
    fn eval_is_deterministic_train_is_not() {
        let (enc, store) = tiny();
        let ids = [CLS, 5, 6, 7, SEP];
        let a = enc.encode(&store, &ids, &mut Mode::Eval).unwrap();
        let b = enc.encode(&store, &ids, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        let mut rng = seeded(3);
        let t = enc.encode(&store, &ids, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(a.token_embeddings, t.token_embeddings);
    }

    #[test]
    fn swapping_tokens_changes_outputs() {
        let (enc, store) = tiny();
        let a = enc.encode(&store, &[CLS, 5, 6, SEP], &mut Mode::Eval).unwrap();
        let b = enc.encode(&store, &[CLS, 6, 5, SEP], &mut Mode::Eval).unwrap();
        // token 5 sits at a different position, so its embedding differs
        assert_ne!(a.token_embeddings.row_slice(1), b.token_embeddings.row_slice(2));
    }

    #[test]
    fn padding_gets_no_attention_and_no_effect() {
        let (enc, store) = tiny();
        let plain = enc.encode(&store, &[CLS, 5, 6, SEP], &mut Mode::Eval).unwrap();
        let padded = enc.encode(&store, &[CLS, 5, 6, SEP, PAD, PAD], &mut Mode::Eval).unwrap();
        rows_stochastic(&padded);
        for layer in &padded.attention_maps {
            for map in layer {
                for i in 0..6 {
                    assert_eq!(map.get(i, 4), 0.0);
                    assert_eq!(map.get(i, 5), 0.0);
                }
            }
        }
        for i in 0..4 {
            for (a, b) in plain.token_embeddings.row_slice(i).iter().zip(padded.token_embeddings.row_slice(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_and_contract_errors() {
        let (enc, store) = tiny();
        let long: Vec<usize> = std::iter::once(CLS).chain([5; 11]).chain([SEP]).collect();
        assert!(matches!(
            enc.encode(&store, &long, &mut Mode::Eval),
            Err(ModelError::Length { len: 13, max: 12 })
        ));
        assert!(enc.encode(&store, &[5, 6, SEP], &mut Mode::Eval).is_err());
        assert!(enc.encode(&store, &[CLS, 6], &mut Mode::Eval).is_err());
        assert!(enc.encode(&store, &[CLS, 99, SEP], &mut Mode::Eval).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            model_dim: 10,
            num_heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            max_seq_len: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
