//! Token importance from a single self-attention head: the mean attention each
//! token receives. Also dev-set head selection and threshold tuning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Tokenized;
use crate::encoder::{EncoderOutput, TokenRole};
use crate::error::ModelError;
use crate::eval::token_map;
use crate::scores::{aggregate_to_words, Aggregation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (l, h) = s.split_once(':').ok_or_else(|| format!("expected LAYER:HEAD, got {s:?}"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(Self {
            layer: parse(l)?,
            head: parse(h)?,
        })
    }
}

/// Which query rows are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryRows {
    /// Real tokens and CLS.
    #[default]
    RealAndCls,
    RealOnly,
    /// Every non-padding row, SEP included.
    NonPad,
}

impl QueryRows {
    pub fn mask(self, roles: &[TokenRole]) -> Vec<bool> {
        roles
            .iter()
            .map(|r| match (self, r) {
                (_, TokenRole::Real) => true,
                (QueryRows::RealAndCls | QueryRows::NonPad, TokenRole::Cls) => true,
                (QueryRows::NonPad, TokenRole::Sep) => true,
                _ => false,
            })
            .collect()
    }
}

/// Mean over the selected rows of every column of an attention map.
pub fn column_mean_scores(map: &Tensor, rows: &[bool]) -> Result<Vec<f64>, ModelError> {
    let (n, m) = map.dims()?;
    if rows.len() != n {
        return Err(ModelError::Validation(format!("{} row flags for {n} rows", rows.len())));
    }
    let count = rows.iter().filter(|&&r| r).count();
    if count == 0 {
        return Err(ModelError::Validation("no query rows selected".into()));
    }
    let mut out = vec![0.0; m];
    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
        for (o, v) in out.iter_mut().zip(map.row_slice(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= count as f64;
    }
    Ok(out)
}

/// Word scores from one head; subword scores combine by `agg`.
pub fn head_token_scores(
    output: &EncoderOutput,
    head: HeadId,
    tok: &Tokenized,
    query: QueryRows,
    agg: Aggregation,
) -> Result<Vec<f64>, ModelError> {
    let map = output
        .attention_maps
        .get(head.layer)
        .and_then(|l| l.get(head.head))
        .ok_or_else(|| ModelError::Index(format!("head {head} is outside the encoder")))?;
    let cols = column_mean_scores(map, &query.mask(&output.roles))?;
    let real: Vec<f64> = output.real_positions().into_iter().map(|p| cols[p]).collect();
    aggregate_to_words(&real, tok, agg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub head: HeadId,
    pub dev_map: f64,
    /// Dev MAP of every head, in (layer, head) order.
    pub all: Vec<(HeadId, f64)>,
}

/// Picks the head with the best dev MAP; ties go to the lower layer, then head.
/// Reads gold token labels of the dev set.
pub fn select_best_head(
    dev: &[(EncoderOutput, Tokenized)],
    gold: &[Option<Vec<bool>>],
    query: QueryRows,
    agg: Aggregation,
) -> Result<HeadSelection, ModelError> {
    if dev.is_empty() || dev.len() != gold.len() {
        return Err(ModelError::Validation("dev set and gold labels must align and be non-empty".into()));
    }
    let gold: Vec<Vec<bool>> = gold
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.clone()
                .ok_or_else(|| ModelError::Validation(format!("dev sentence {i} lacks token labels")))
        })
        .collect::<Result<_, _>>()?;
    let layers = dev[0].0.attention_maps.len();
    let heads = dev[0].0.attention_maps.first().map_or(0, Vec::len);
    if layers == 0 || heads == 0 {
        return Err(ModelError::Validation("encoder output carries no attention maps".into()));
    }
    let mut all = Vec::with_capacity(layers * heads);
    let mut best: Option<(HeadId, f64)> = None;
    for layer in 0..layers {
        for head in 0..heads {
            let id = HeadId { layer, head };
            let scores: Vec<Vec<f64>> = dev
                .iter()
                .map(|(o, t)| head_token_scores(o, id, t, query, agg))
                .collect::<Result<_, _>>()?;
            let map = token_map(&scores, &gold)?;
            all.push((id, map));
            if best.map_or(true, |b| map > b.1) {
                best = Some((id, map));
            }
        }
    }
    let (head, dev_map) = best.expect("at least one head");
    Ok(HeadSelection { head, dev_map, all })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub dev_f1: f64,
    /// The dev set had no positive tokens; nothing will be predicted positive.
    pub no_positives: bool,
}

/// Threshold maximising dev token F1 (positive iff `score > threshold`).
/// Candidates are one value below the minimum score and the midpoints between
/// consecutive distinct scores; ties go to the smallest candidate.
pub fn tune_threshold(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<ThresholdChoice, ModelError> {
    if scores.len() != gold.len() || scores.iter().zip(gold).any(|(s, g)| s.len() != g.len()) {
        return Err(ModelError::Alignment("scores and gold labels differ in shape".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .flatten()
        .copied()
        .zip(gold.iter().flatten().copied())
        .collect();
    if pairs.is_empty() {
        return Err(ModelError::Validation("no scored dev tokens".into()));
    }
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(ModelError::Validation("dev scores must be finite".into()));
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Ok(ThresholdChoice {
            threshold: f64::INFINITY,
            dev_f1: 0.0,
            no_positives: true,
        });
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep upwards: at each candidate everything above it is predicted positive.
    let mut tp = positives;
    let mut fp = pairs.len() - positives;
    let f1_frac = |tp: usize, fp: usize| (2 * tp, 2 * tp + fp + (positives - tp));
    let better = |a: (usize, usize), b: (usize, usize)| (a.0 as u128) * (b.1 as u128) > (b.0 as u128) * (a.1 as u128);

    let mut best_t = pairs[0].0 - 1.0;
    let mut best = f1_frac(tp, fp);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        if i == pairs.len() {
            break;
        }
        let next = pairs[i].0;
        let mut mid = (v + next) / 2.0;
        if mid >= next {
            mid = v;
        }
        let cand = f1_frac(tp, fp);
        if better(cand, best) {
            best = cand;
            best_t = mid;
        }
    }
    Ok(ThresholdChoice {
        threshold: best_t,
        dev_f1: best.0 as f64 / best.1 as f64,
        no_positives: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::token_prf;
    use proptest::prelude::*;

    fn t(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_built_maps() {
        let all = [true; 3];
        let u = column_mean_scores(&Tensor::filled(&[3, 3], 1.0 / 3.0), &all).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let m = t(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(column_mean_scores(&m, &all).unwrap(), vec![1.0, 0.0, 0.0]);
        let m = t(&[[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.1, 0.1, 0.8]]);
        let s = column_mean_scores(&m, &all).unwrap();
        for (a, b) in s.iter().zip([0.8 / 3.0, 0.3, 1.3 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn query_row_choices() {
        use TokenRole::*;
        let roles = [Cls, Real, Real, Sep, Pad];
        assert_eq!(QueryRows::RealAndCls.mask(&roles), [true, true, true, false, false]);
        assert_eq!(QueryRows::RealOnly.mask(&roles), [false, true, true, false, false]);
        assert_eq!(QueryRows::NonPad.mask(&roles), [true, true, true, true, false]);
        assert_eq!("1:3".parse::<HeadId>().unwrap(), HeadId { layer: 1, head: 3 });
        assert!("13".parse::<HeadId>().is_err());
    }

    /// Exhaustive scan: evaluates F1 at every candidate by recounting.
    fn brute_threshold(scores: &[f64], gold: &[bool]) -> (f64, f64) {
        let mut u: Vec<f64> = scores.to_vec();
        u.sort_by(f64::total_cmp);
        u.dedup();
        let mut cands = vec![u[0] - 1.0];
        cands.extend(u.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        let mut best = (f64::NAN, -1.0);
        for c in cands {
            let p = token_prf(&[scores.to_vec()], &[gold.to_vec()], c).unwrap();
            if p.f1 > best.1 + 1e-12 {
                best = (c, p.f1);
            }
        }
        best
    }

    #[test]
    fn separable_scores() {
        let choice = tune_threshold(&[vec![0.1, 0.9, 0.2, 0.8]], &[vec![false, true, false, true]]).unwrap();
        assert!((choice.threshold - 0.5).abs() < 1e-15);
        assert_eq!(choice.dev_f1, 1.0);
        let none = tune_threshold(&[vec![0.1, 0.9]], &[vec![false, false]]).unwrap();
        assert!(none.no_positives && none.threshold == f64::INFINITY);
        assert!(tune_threshold(&[vec![0.1]], &[vec![true, false]]).is_err());
    }

    proptest! {
        #[test]
        fn tuner_matches_exhaustive_scan(
            pairs in prop::collection::vec((0u8..20, any::<bool>()), 1..200)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 19.0).collect();
            let gold: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let got = tune_threshold(&[scores.clone()], &[gold.clone()]).unwrap();
            if gold.contains(&true) {
                let (t, f) = brute_threshold(&scores, &gold);
                prop_assert_eq!(got.threshold, t);
                prop_assert!((got.dev_f1 - f).abs() < 1e-12);
            } else {
                prop_assert!(got.no_positives);
            }
        }
    }
}
