//! Sigmoid soft attention over the encoder's token outputs, with an optional
//! sharpening exponent on the normalised weights.
//!
//! For real token embeddings `T_i`:
//!
//! ```text
//! e_i  = tanh(W_e T_i + b_e)          ẽ_i = W_ẽ e_i + b_ẽ
//! ã_i  = σ(ẽ_i)                       a_i = ã_i^β / (Σ_k ã_k^β + ε)
//! c    = Σ_i a_i T_i
//! d    = tanh(W_d c + b_d)            y   = σ(W_y d + b_y)
//! ```
//!
//! `ã_i` doubles as the token score (threshold 0.5). Training minimises
//! `L1 + γ (L2 + L3)`: sentence cross-entropy, the squared minimum of `ã`
//! (pushed to 0) and the squared gap between the maximum of `ã` and the gold
//! sentence label.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamStore, Var};
use crate::data::Tokenized;
use crate::encoder::{EncoderOutput, TokenRole};
use crate::error::ModelError;
use crate::rng::SeededRng;
use crate::scores::{aggregate_to_words, Aggregation};
use crate::tensor::{glorot_with, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Sharpening exponent; 1 gives plain sum-normalisation.
    pub beta: f64,
    /// Weight of the two auxiliary attention losses.
    pub gamma: f64,
    /// Added to the normalisation denominator.
    pub norm_epsilon: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            gamma: 0.1,
            norm_epsilon: 1e-8,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(ModelError::Config(format!("beta {} must be >= 1", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(ModelError::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(ModelError::Config("norm_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }
}

/// How `ã` becomes the weights `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// `ã_i / Σ ã_k`.
    Plain,
    /// `ã_i^β / (Σ ã_k^β + ε)`.
    Sharpened { beta: f64, epsilon: f64 },
}

impl From<&HeadConfig> for Normalization {
    fn from(c: &HeadConfig) -> Self {
        Normalization::Sharpened {
            beta: c.beta,
            epsilon: c.norm_epsilon,
        }
    }
}

/// Plain-value version of the weight normalisation.
pub fn normalize_weights(a_tilde: &[f64], norm: Normalization) -> Vec<f64> {
    match norm {
        Normalization::Plain => {
            let total: f64 = a_tilde.iter().sum();
            a_tilde.iter().map(|v| v / total).collect()
        }
        Normalization::Sharpened { beta, epsilon } => {
            let powered: Vec<f64> = a_tilde
                .iter()
                .map(|&v| if beta == 1.0 { v } else { v.powf(beta) })
                .collect();
            let total = powered.iter().sum::<f64>() + epsilon;
            powered.iter().map(|v| v / total).collect()
        }
    }
}

/// Values from one sentence's pass through the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftAttnForward {
    /// `n_real × attn_layer_size`.
    pub e: Tensor,
    pub e_tilde: Vec<f64>,
    pub a_tilde: Vec<f64>,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub logit: f64,
    pub y: f64,
}

impl SoftAttnForward {
    /// Word scores: the per-word maximum (by default) of `ã` over its tokens.
    pub fn token_scores(&self, tok: &Tokenized, agg: Aggregation) -> Result<Vec<f64>, ModelError> {
        aggregate_to_words(&self.a_tilde, tok, agg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Loss terms evaluated on plain values. Labels must be 0 or 1.
pub fn joint_loss(
    forwards: &[SoftAttnForward],
    gold: &[u8],
    gamma: f64,
) -> Result<LossComponents, ModelError> {
    if forwards.is_empty() || forwards.len() != gold.len() {
        return Err(ModelError::Validation(format!(
            "{} forwards for {} labels",
            forwards.len(),
            gold.len()
        )));
    }
    if let Some(bad) = gold.iter().find(|&&g| g > 1) {
        return Err(ModelError::Validation(format!("non-binary gold label {bad}")));
    }
    let n = forwards.len() as f64;
    let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
    for (f, &g) in forwards.iter().zip(gold) {
        let t = f64::from(g);
        l1 -= t * f.y.ln() + (1.0 - t) * (1.0 - f.y).ln();
        let min = f.a_tilde.iter().copied().fold(f64::INFINITY, f64::min);
        let max = f.a_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        l2 += min * min;
        l3 += (max - t) * (max - t);
    }
    let (l1, l2, l3) = (l1 / n, l2 / n, l3 / n);
    Ok(LossComponents {
        total: l1 + gamma * (l2 + l3),
        l1,
        l2,
        l3,
    })
}

/// Graph handles for a batch pass through the head.
pub struct SoftGraph {
    /// Per sentence, `n_real × 1`.
    pub a_tilde: Vec<Var>,
    pub weights: Vec<Var>,
    e: Var,
    e_tilde: Var,
    rows: Vec<(usize, usize)>,
    pub c: Var,
    pub d: Var,
    /// `B × 1`.
    pub logits: Var,
    pub probs: Var,
}

/// Graph handles for the three loss terms and their weighted sum.
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
}

impl SoftGraph {
    pub fn sentence_values(&self, g: &Graph, s: usize) -> SoftAttnForward {
        let (off, n) = self.rows[s];
        let e_all = g.value(self.e);
        let cols = e_all.cols();
        let e = Tensor::new(vec![n, cols], e_all.values()[off * cols..(off + n) * cols].to_vec())
            .expect("slice of a valid tensor");
        let row = |v: Var| g.value(v).row_slice(s).to_vec();
        SoftAttnForward {
            e,
            e_tilde: g.value(self.e_tilde).values()[off..off + n].to_vec(),
            a_tilde: g.value(self.a_tilde[s]).values().to_vec(),
            a: g.value(self.weights[s]).values().to_vec(),
            c: row(self.c),
            d: row(self.d),
            logit: g.value(self.logits).values()[s],
            y: g.value(self.probs).values()[s],
        }
    }

    /// `L1 + γ (L2 + L3)` on the graph. Min and max run over real tokens only.
    pub fn joint_loss(&self, g: &mut Graph, labels: &[bool], gamma: f64) -> Result<LossVars, ModelError> {
        if labels.len() != self.a_tilde.len() {
            return Err(ModelError::Validation(format!(
                "{} labels for {} sentences",
                labels.len(),
                self.a_tilde.len()
            )));
        }
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let l1 = g.bce_with_logits(self.logits, &targets)?;
        let mut mins = Vec::with_capacity(labels.len());
        let mut maxs = Vec::with_capacity(labels.len());
        for (&at, &t) in self.a_tilde.iter().zip(&targets) {
            let mn = g.min_all(at)?;
            mins.push(g.mul(mn, mn)?);
            let mx = g.max_all(at)?;
            let gap = g.add_scalar(mx, -t);
            maxs.push(g.mul(gap, gap)?);
        }
        let l2 = g.concat_rows(&mins)?;
        let l2 = g.mean(l2);
        let l3 = g.concat_rows(&maxs)?;
        let l3 = g.mean(l3);
        let aux = g.add(l2, l3)?;
        let aux = g.scale(aux, gamma);
        let total = g.add(l1, aux)?;
        Ok(LossVars { total, l1, l2, l3 })
    }
}

#[derive(Clone, Debug)]
pub struct SoftAttentionHead {
    w_e: ParamId,
    b_e: ParamId,
    w_et: ParamId,
    b_et: ParamId,
    w_d: ParamId,
    b_d: ParamId,
    w_y: ParamId,
    b_y: ParamId,
}

fn shapes(model_dim: usize, layer: usize, hidden: usize) -> [(&'static str, [usize; 2]); 8] {
    [
        ("softattn.e.weight", [model_dim, layer]),
        ("softattn.e.bias", [1, layer]),
        ("softattn.e_tilde.weight", [layer, 1]),
        ("softattn.e_tilde.bias", [1, 1]),
        ("softattn.d.weight", [model_dim, hidden]),
        ("softattn.d.bias", [1, hidden]),
        ("softattn.y.weight", [hidden, 1]),
        ("softattn.y.bias", [1, 1]),
    ]
}

impl SoftAttentionHead {
    pub fn init(
        store: &mut ParamStore,
        model_dim: usize,
        layer_size: usize,
        hidden_size: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, ModelError> {
        for (name, shape) in shapes(model_dim, layer_size, hidden_size) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                glorot_with(&shape, rng)?
            };
            store.insert(name, t);
        }
        Self::bind(store, model_dim, layer_size, hidden_size)
    }

    pub fn bind(
        store: &ParamStore,
        model_dim: usize,
        layer_size: usize,
        hidden_size: usize,
    ) -> Result<Self, ModelError> {
        let mut ids = Vec::with_capacity(8);
        for (name, shape) in shapes(model_dim, layer_size, hidden_size) {
            let id = store
                .id(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if store.get(id).shape() != shape {
                return Err(ModelError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            ids.push(id);
        }
        Ok(Self {
            w_e: ids[0],
            b_e: ids[1],
            w_et: ids[2],
            b_et: ids[3],
            w_d: ids[4],
            b_d: ids[5],
            w_y: ids[6],
            b_y: ids[7],
        })
    }

    /// Runs the head over a batch. `rows[s] = (first_row, n_real)` locates the
    /// real tokens of sentence `s` inside `hidden`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        rows: &[(usize, usize)],
        norm: Normalization,
    ) -> Result<SoftGraph, ModelError> {
        if let Some(s) = rows.iter().position(|r| r.1 == 0) {
            return Err(ModelError::Contract(format!("sentence {s} has no real tokens")));
        }
        let w_e = g.param(store, self.w_e);
        let b_e = g.param(store, self.b_e);
        let e = g.matmul(hidden, w_e)?;
        let e = g.add(e, b_e)?;
        let e = g.tanh(e)?;
        let w_et = g.param(store, self.w_et);
        let b_et = g.param(store, self.b_et);
        let et = g.matmul(e, w_et)?;
        let et = g.add(et, b_et)?;
        let at_all = g.sigmoid(et)?;

        let mut a_tilde = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        let mut cs = Vec::with_capacity(rows.len());
        for &(off, n) in rows {
            let at = g.slice(at_all, off, n, 0, 1)?;
            let tokens = g.slice_rows(hidden, off, n)?;
            let a = match norm {
                Normalization::Plain => {
                    let den = g.sum(at);
                    g.div(at, den)?
                }
                Normalization::Sharpened { beta, epsilon } => {
                    let p = g.power(at, beta)?;
                    let den = g.sum(p);
                    let den = g.add_scalar(den, epsilon);
                    g.div(p, den)?
                }
            };
            let at_row = g.transpose(a)?;
            cs.push(g.matmul(at_row, tokens)?);
            a_tilde.push(at);
            weights.push(a);
        }
        let c = if cs.len() == 1 { cs[0] } else { g.concat_rows(&cs)? };
        let w_d = g.param(store, self.w_d);
        let b_d = g.param(store, self.b_d);
        let d = g.matmul(c, w_d)?;
        let d = g.add(d, b_d)?;
        let d = g.tanh(d)?;
        let w_y = g.param(store, self.w_y);
        let b_y = g.param(store, self.b_y);
        let logits = g.matmul(d, w_y)?;
        let logits = g.add(logits, b_y)?;
        let probs = g.sigmoid(logits)?;
        Ok(SoftGraph {
            a_tilde,
            weights,
            e,
            e_tilde: et,
            rows: rows.to_vec(),
            c,
            d,
            logits,
            probs,
        })
    }

    /// One sentence from precomputed encoder output.
    pub fn forward(
        &self,
        store: &ParamStore,
        out: &EncoderOutput,
        norm: Normalization,
    ) -> Result<SoftAttnForward, ModelError> {
        let real = out.real_positions();
        let Some(&first) = real.first() else {
            return Err(ModelError::Contract("no real tokens to attend over".into()));
        };
        if real.iter().enumerate().any(|(i, &p)| p != first + i) {
            return Err(ModelError::Contract("real tokens must be contiguous".into()));
        }
        let mut g = Graph::new();
        let hidden = g.constant(out.token_embeddings.clone());
        let sg = self.forward_graph(&mut g, store, hidden, &[(first, real.len())], norm)?;
        Ok(sg.sentence_values(&g, 0))
    }
}

/// `(first_row, n_real)` for every sentence of an encoded batch.
pub fn real_rows(roles: &[Vec<TokenRole>], offsets: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    roles
        .iter()
        .zip(offsets)
        .map(|(r, off)| {
            let n = r.iter().filter(|&&x| x == TokenRole::Real).count();
            (off + 1, n)
        })
        .collect()
}

/// `σ` re-exported for callers computing probabilities from stored logits.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit)
}
