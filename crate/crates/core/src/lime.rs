//! Perturbation-based word importance: mask random word subsets, query the
//! sentence classifier, and fit a kernel-weighted ridge regression of the
//! classifier's probability on word presence.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Tokenized, CLS, MASK, SEP};
use crate::error::ModelError;
use crate::model::Model;
use crate::rng::{derive, SeededRng};

/// How a removed word is hidden from the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Masking {
    /// Every subword of the word becomes the MASK token.
    #[default]
    Mask,
    /// The word's subwords are dropped.
    Delete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub n_samples: usize,
    /// Width of the exponential kernel on cosine distance.
    pub kernel_width: f64,
    pub ridge: f64,
    pub masking: Masking,
    pub seed: u64,
    /// Perturbed sentences per classifier batch.
    pub batch_size: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            kernel_width: 0.25,
            ridge: 1.0,
            masking: Masking::Mask,
            seed: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSample {
    /// `true` = word kept.
    pub presence: Vec<bool>,
    pub probability: f64,
    pub weight: f64,
}

/// Presence patterns: the unperturbed sentence first, then `n_samples - 1`
/// draws with `k ~ U{1..N-1}` words masked (`k = 1` when `N = 1`).
pub fn sample_masks(n_words: usize, n_samples: usize, rng: &mut SeededRng) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(n_samples);
    if n_samples == 0 || n_words == 0 {
        return out;
    }
    out.push(vec![true; n_words]);
    for _ in 1..n_samples {
        let k = if n_words == 1 { 1 } else { rng.gen_range(1..n_words) };
        let mut z = vec![true; n_words];
        for i in index::sample(rng, n_words, k) {
            z[i] = false;
        }
        out.push(z);
    }
    out
}

/// `exp(-D² / width²)` with `D` the cosine distance to the all-ones vector.
pub fn kernel_weight(presence: &[bool], width: f64) -> f64 {
    let kept = presence.iter().filter(|&&z| z).count();
    let d = if kept == 0 {
        1.0
    } else {
        1.0 - (kept as f64 / presence.len() as f64).sqrt()
    };
    (-(d * d) / (width * width)).exp()
}

/// Draws masks and queries `classify` once per distinct pattern.
pub fn generate_samples<F>(
    n_words: usize,
    cfg: &LimeConfig,
    rng: &mut SeededRng,
    mut classify: F,
) -> Result<Vec<PerturbationSample>, ModelError>
where
    F: FnMut(&[Vec<bool>]) -> Result<Vec<f64>, ModelError>,
{
    if n_words == 0 || cfg.n_samples == 0 {
        return Err(ModelError::Validation("LIME needs at least one word and one sample".into()));
    }
    let masks = sample_masks(n_words, cfg.n_samples, rng);
    let mut cache: HashMap<&[bool], f64> = HashMap::new();
    let mut distinct: Vec<Vec<bool>> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for m in &masks {
            if seen.insert(m.as_slice()) {
                distinct.push(m.clone());
            }
        }
    }
    let probs = classify(&distinct)?;
    if probs.len() != distinct.len() {
        return Err(ModelError::Contract(format!(
            "classifier returned {} probabilities for {} inputs",
            probs.len(),
            distinct.len()
        )));
    }
    for (m, p) in distinct.iter().zip(&probs) {
        cache.insert(m.as_slice(), *p);
    }
    Ok(masks
        .iter()
        .map(|m| PerturbationSample {
            presence: m.clone(),
            probability: cache[m.as_slice()],
            weight: kernel_weight(m, cfg.kernel_width),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Ridge strength that produced a well-conditioned system.
    pub ridge_used: f64,
}

/// Weighted ridge regression of probability on presence. Features are
/// standardised (weighted) before the penalty is applied; the returned
/// weights are in presence units. Constant features get weight 0.
pub fn fit_local_model(samples: &[PerturbationSample], ridge: f64) -> Result<LocalModel, ModelError> {
    let first = samples
        .first()
        .ok_or_else(|| ModelError::Validation("no samples to fit".into()))?;
    let n_words = first.presence.len();
    if samples.iter().any(|s| s.presence.len() != n_words) {
        return Err(ModelError::Validation("presence vectors differ in length".into()));
    }
    if samples.iter().all(|s| s.presence == first.presence) {
        return Err(ModelError::Validation("need at least two distinct presence vectors".into()));
    }
    if !(ridge >= 0.0) {
        return Err(ModelError::Config("ridge strength must be >= 0".into()));
    }
    let total_w: f64 = samples.iter().map(|s| s.weight).sum();
    let x = |s: &PerturbationSample, j: usize| f64::from(u8::from(s.presence[j]));
    let mean_y = samples.iter().map(|s| s.weight * s.probability).sum::<f64>() / total_w;
    let mut mean_x = vec![0.0; n_words];
    let mut scale = vec![0.0; n_words];
    for j in 0..n_words {
        mean_x[j] = samples.iter().map(|s| s.weight * x(s, j)).sum::<f64>() / total_w;
        let var = samples
            .iter()
            .map(|s| s.weight * (x(s, j) - mean_x[j]).powi(2))
            .sum::<f64>()
            / total_w;
        scale[j] = var.sqrt();
    }
    let active: Vec<usize> = (0..n_words).filter(|&j| scale[j] > 1e-12).collect();
    let p = active.len();
    let mut weights = vec![0.0; n_words];
    if p > 0 {
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut row = vec![0.0; p];
        for s in samples {
            for (r, &j) in row.iter_mut().zip(&active) {
                *r = (x(s, j) - mean_x[j]) / scale[j];
            }
            let yc = s.probability - mean_y;
            for a in 0..p {
                rhs[a] += s.weight * row[a] * yc;
                for b in 0..=a {
                    gram[(a, b)] += s.weight * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let mut strength = ridge;
        let mut attempt = 0;
        let solution = loop {
            let mut m = gram.clone();
            for a in 0..p {
                m[(a, a)] += strength;
            }
            let chol = m.cholesky().filter(|c| {
                let l = c.l_dirty();
                let diag: Vec<f64> = (0..p).map(|i| l[(i, i)]).collect();
                let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
                lo > 0.0 && (hi / lo).powi(2) < 1e14
            });
            match chol {
                Some(c) => break c.solve(&rhs),
                None if attempt < 3 => {
                    attempt += 1;
                    strength = strength.max(1e-8) * 10.0;
                }
                None => return Err(ModelError::Conditioning(strength)),
            }
        };
        for (k, &j) in active.iter().enumerate() {
            weights[j] = solution[k] / scale[j];
        }
        return Ok(LocalModel {
            intercept: mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>(),
            weights,
            ridge_used: strength,
        });
    }
    Ok(LocalModel {
        weights,
        intercept: mean_y,
        ridge_used: ridge,
    })
}

/// Token ids of the sentence with the absent words masked or removed.
pub fn perturb(tok: &Tokenized, presence: &[bool], masking: Masking) -> Vec<usize> {
    let real = &tok.token_ids[1..1 + tok.alignment.len()];
    let mut ids = Vec::with_capacity(tok.token_ids.len());
    ids.push(CLS);
    for (&id, &w) in real.iter().zip(&tok.alignment) {
        match (presence[w], masking) {
            (true, _) => ids.push(id),
            (false, Masking::Mask) => ids.push(MASK),
            (false, Masking::Delete) => {}
        }
    }
    if ids.len() == 1 {
        ids.push(MASK);
    }
    ids.push(SEP);
    ids
}

/// Explains the model's sentence probability for one tokenized sentence.
/// Words lost to truncation keep presence 1 and score 0.
pub fn lime_scores(model: &Model, tok: &Tokenized, cfg: &LimeConfig, sentence_index: u64) -> Result<LocalModel, ModelError> {
    let n = tok.words_covered();
    let mut rng = derive(cfg.seed, 0x11AE ^ sentence_index.wrapping_mul(0x9E37_79B9));
    let samples = generate_samples(n, cfg, &mut rng, |masks| {
        let seqs: Vec<Vec<usize>> = masks.iter().map(|m| perturb(tok, m, cfg.masking)).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        model.predict(&refs, cfg.batch_size)
    })?;
    let mut local = fit_local_model(&samples, cfg.ridge)?;
    local.weights.resize(tok.n_words.max(n), 0.0);
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::collections::HashSet;

    fn exhaustive(n: usize, f: impl Fn(&[bool]) -> f64, width: f64) -> Vec<PerturbationSample> {
        (0..1u32 << n)
            .map(|bits| {
                let z: Vec<bool> = (0..n).map(|j| bits >> j & 1 == 1).collect();
                PerturbationSample {
                    probability: f(&z),
                    weight: kernel_weight(&z, width),
                    presence: z,
                }
            })
            .collect()
    }

    #[test]
    fn sampling_rules() {
        let mut rng = seeded(1);
        assert_eq!(sample_masks(4, 1, &mut rng), vec![vec![true; 4]]);
        let pats: HashSet<Vec<bool>> = sample_masks(2, 500, &mut rng).into_iter().collect();
        let allowed: HashSet<Vec<bool>> = [vec![true, true], vec![true, false], vec![false, true]].into();
        assert!(pats.is_subset(&allowed));
        assert_eq!(pats.len(), 3);
        let one = sample_masks(1, 5, &mut rng);
        assert_eq!(one[0], vec![true]);
        assert!(one[1..].iter().all(|z| z == &vec![false]));
    }

    #[test]
    fn masked_count_is_uniform() {
        // chi-square goodness of fit of k over {1..5}, 4 degrees of freedom
        let mut rng = seeded(2);
        let masks = sample_masks(6, 10_001, &mut rng);
        let mut counts = [0usize; 5];
        for z in &masks[1..] {
            counts[z.iter().filter(|&&b| !b).count() - 1] += 1;
        }
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.47, "{counts:?} chi2 {chi2}");
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_weight(&[true; 4], 0.25), 1.0);
        assert!((kernel_weight(&[false; 4], 0.25) - (-16f64).exp()).abs() < 1e-20);
        let d: f64 = 1.0 - 0.5f64.sqrt();
        assert!((kernel_weight(&[true, false], 0.25) - (-d * d / 0.0625).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_classifier() {
        let s = exhaustive(4, |_| 0.37, 0.25);
        let m = fit_local_model(&s, 1.0).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-6));
        assert!((m.intercept - 0.37).abs() < 1e-12);
    }

    #[test]
    fn single_word_indicator() {
        let s = exhaustive(5, |z| f64::from(u8::from(z[3])), 0.25);
        let m = fit_local_model(&s, 1e-10).unwrap();
        for (j, w) in m.weights.iter().enumerate() {
            let want = if j == 3 { 1.0 } else { 0.0 };
            assert!((w - want).abs() < 1e-6, "{:?}", m.weights);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let mut rng = seeded(4);
        let cfg = LimeConfig { n_samples: 200, ..Default::default() };
        let f = |z: &[bool]| 0.2 + 0.5 * f64::from(u8::from(z[0])) - 0.1 * f64::from(u8::from(z[2]));
        let mut s = generate_samples(4, &cfg, &mut rng, |ms| Ok(ms.iter().map(|z| f(z)).collect())).unwrap();
        let a = fit_local_model(&s, 1.0).unwrap();
        s.reverse();
        let b = fit_local_model(&s, 1.0).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let one = vec![PerturbationSample { presence: vec![true, true], probability: 0.5, weight: 1.0 }; 3];
        assert!(matches!(fit_local_model(&one, 1.0), Err(ModelError::Validation(_))));
        assert!(fit_local_model(&[], 1.0).is_err());
        // two perfectly collinear words with no ridge: retries then succeeds
        let s: Vec<PerturbationSample> = [[true, true], [false, false], [true, true]]
            .iter()
            .map(|z| PerturbationSample { presence: z.to_vec(), probability: f64::from(u8::from(z[0])), weight: 1.0 })
            .collect();
        let m = fit_local_model(&s, 0.0).unwrap();
        assert!(m.ridge_used > 0.0);
        assert!((m.weights[0] - m.weights[1]).abs() < 1e-6, "{:?}", m.weights);
        assert!((m.weights[0] + m.weights[1] - 1.0).abs() < 1e-6);
    }
}
