//! Sentence and token metrics, seed aggregation and a paired t-test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::ModelError;
use crate::rng::derive;
use crate::scores::{ImportanceScores, Method, SentenceScores};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Precision is 0 when nothing is predicted positive; F1 is 0 when P + R = 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
            tp,
            fp,
            fn_,
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_aligned(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<(), ModelError> {
    if scores.len() != gold.len() {
        return Err(ModelError::Alignment(format!(
            "{} scored sentences for {} gold sentences",
            scores.len(),
            gold.len()
        )));
    }
    for (i, (s, g)) in scores.iter().zip(gold).enumerate() {
        if s.len() != g.len() {
            return Err(ModelError::Alignment(format!(
                "sentence {i}: {} scores for {} gold labels",
                s.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Micro-averaged P/R/F1 on the positive class; positive iff `score > threshold`.
pub fn token_prf(scores: &[Vec<f64>], gold: &[Vec<bool>], threshold: f64) -> Result<Prf, ModelError> {
    check_aligned(scores, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (s, g) in scores.iter().zip(gold) {
        for (&v, &y) in s.iter().zip(g) {
            match (v > threshold, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

pub fn sentence_prf(probs: &[f64], gold: &[bool], threshold: f64) -> Result<Prf, ModelError> {
    if probs.is_empty() {
        return Err(ModelError::Validation("empty corpus".into()));
    }
    token_prf(&[probs.to_vec()], &[gold.to_vec()], threshold)
}

/// Ranking by descending score, ties by ascending position.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision of one ranking; `None` without gold positives.
pub fn average_precision(scores: &[f64], gold: &[bool]) -> Option<f64> {
    let positives = gold.iter().filter(|&&g| g).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0;
    let mut total = 0.0;
    for (k, i) in ranking(scores).into_iter().enumerate() {
        if gold[i] {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Mean of per-sentence AP over sentences with at least one gold positive.
pub fn token_map(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<f64, ModelError> {
    check_aligned(scores, gold)?;
    let aps: Vec<f64> = scores
        .iter()
        .zip(gold)
        .filter_map(|(s, g)| average_precision(s, g))
        .collect();
    if aps.is_empty() {
        return Err(ModelError::Undefined("MAP needs a sentence with a gold positive".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// AP of one ranking over every token of the corpus.
pub fn global_map(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<f64, ModelError> {
    check_aligned(scores, gold)?;
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_g: Vec<bool> = gold.iter().flatten().copied().collect();
    average_precision(&flat_s, &flat_g)
        .ok_or_else(|| ModelError::Undefined("MAP needs a gold positive".into()))
}

/// Uniform `[0, 1)` scores per word, threshold 0.5.
pub fn random_baseline(ds: &Dataset, seed: u64) -> ImportanceScores {
    let mut rng = derive(seed, 0xBA5E);
    let mut out = ImportanceScores::new(Method::Random, Method::Random.default_threshold());
    out.meta.insert("seed".into(), seed.to_string());
    out.sentences = ds
        .sentences
        .iter()
        .map(|s| SentenceScores {
            words: s.words.clone(),
            scores: (0..s.words.len()).map(|_| rng.gen::<f64>()).collect(),
            sentence_prob: None,
        })
        .collect();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seed: Option<u64>,
    pub threshold: f64,
    /// Absent when the scores carry no sentence probabilities.
    pub sentence: Option<Prf>,
    pub token: Prf,
    pub map: f64,
    pub global_map: f64,
}

/// Scores every metric of one scores file against gold labels.
pub fn evaluate(scores: &ImportanceScores, gold: &Dataset) -> Result<MetricsReport, ModelError> {
    if scores.sentences.len() != gold.len() {
        return Err(ModelError::Alignment(format!(
            "{} scored sentences for {} gold sentences",
            scores.sentences.len(),
            gold.len()
        )));
    }
    let mut token_gold = Vec::with_capacity(gold.len());
    for (i, (s, g)) in scores.sentences.iter().zip(&gold.sentences).enumerate() {
        if s.words != g.words {
            return Err(ModelError::Alignment(format!("sentence {i}: words differ from the gold file")));
        }
        let labels = g
            .token_labels
            .clone()
            .ok_or_else(|| ModelError::Validation(format!("sentence {i} has no gold token labels")))?;
        token_gold.push(labels);
    }
    let token_scores: Vec<Vec<f64>> = scores.sentences.iter().map(|s| s.scores.clone()).collect();
    let probs: Option<Vec<f64>> = scores.sentences.iter().map(|s| s.sentence_prob).collect();
    let sent_gold: Vec<bool> = gold.sentences.iter().map(|s| s.sentence_label).collect();
    let sentence = match probs {
        Some(p) if !p.is_empty() => Some(sentence_prf(&p, &sent_gold, 0.5)?),
        _ => None,
    };
    Ok(MetricsReport {
        method: scores.method,
        seed: scores.seed(),
        threshold: scores.threshold,
        sentence,
        token: token_prf(&token_scores, &token_gold, scores.threshold)?,
        map: token_map(&token_scores, &token_gold)?,
        global_map: global_map(&token_scores, &token_gold)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: Method,
    /// Row name overriding the method's display name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub seeds: Vec<Option<u64>>,
    pub sentence_f1: Option<f64>,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    pub map: f64,
    pub global_map: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Arithmetic means over per-seed reports of one method.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<AggregateReport, ModelError> {
    let first = reports
        .first()
        .ok_or_else(|| ModelError::Validation("no reports to aggregate".into()))?;
    if reports.iter().any(|r| r.method != first.method) {
        return Err(ModelError::Validation("reports mix methods".into()));
    }
    let sentence_f1 = reports
        .iter()
        .map(|r| r.sentence.map(|s| s.f1))
        .collect::<Option<Vec<f64>>>()
        .map(mean);
    Ok(AggregateReport {
        method: first.method,
        label: None,
        seeds: reports.iter().map(|r| r.seed).collect(),
        sentence_f1,
        token_precision: mean(reports.iter().map(|r| r.token.precision)),
        token_recall: mean(reports.iter().map(|r| r.token.recall)),
        token_f1: mean(reports.iter().map(|r| r.token.f1)),
        map: mean(reports.iter().map(|r| r.map)),
        global_map: mean(reports.iter().map(|r| r.global_map)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_difference: f64,
    /// Differences have zero variance, so `t` is not defined.
    pub undefined_variance: bool,
}

/// Two-tailed paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Validation(format!("{} pairs against {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(ModelError::Validation("a paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let m = mean(diffs.iter().copied());
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        return Ok(TTest {
            t: if m == 0.0 { 0.0 } else { m.signum() * f64::INFINITY },
            df,
            p_value: if m == 0.0 { 1.0 } else { 0.0 },
            mean_difference: m,
            undefined_variance: true,
        });
    }
    let t = m / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| ModelError::Validation(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: 2.0 * dist.sf(t.abs()),
        mean_difference: m,
        undefined_variance: false,
    })
}

pub type Metric = fn(&MetricsReport) -> f64;

/// Pairs two methods' reports by seed and tests one metric.
pub fn compare_methods(a: &[MetricsReport], b: &[MetricsReport], metric: Metric) -> Result<TTest, ModelError> {
    let by_seed = |rs: &[MetricsReport]| -> Result<BTreeMap<u64, f64>, ModelError> {
        let mut m = BTreeMap::new();
        for r in rs {
            let seed = r
                .seed
                .ok_or_else(|| ModelError::Validation("pairing needs a seed on every report".into()))?;
            if m.insert(seed, metric(r)).is_some() {
                return Err(ModelError::Validation(format!("seed {seed} appears twice")));
            }
        }
        Ok(m)
    };
    let (ma, mb) = (by_seed(a)?, by_seed(b)?);
    if ma.keys().ne(mb.keys()) {
        return Err(ModelError::Validation("methods were run on different seeds".into()));
    }
    let xa: Vec<f64> = ma.values().copied().collect();
    let xb: Vec<f64> = mb.values().copied().collect();
    paired_t_test(&xa, &xb)
}

/// Text table with columns Sent F1, P, R, F1, MAP (percentages).
pub fn render_table(rows: &[AggregateReport]) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let name = |r: &AggregateReport| r.label.clone().unwrap_or_else(|| r.method.display_name().to_string());
    let width = rows
        .iter()
        .map(|r| name(r).len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>6}",
        "Method", "Sent F1", "P", "R", "F1", "MAP"
    );
    for r in rows {
        let sent = r.sentence_f1.map_or_else(|| "-".to_string(), pct);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>6}",
            name(r),
            sent,
            pct(r.token_precision),
            pct(r.token_recall),
            pct(r.token_f1),
            pct(r.map)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledSentence;
    use proptest::prelude::*;

    #[test]
    fn prf_hand_counts() {
        let p = token_prf(&[vec![1.0, 0.0, 1.0, 1.0]], &[vec![true, true, false, true]], 0.5).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (2, 1, 1));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        let p = token_prf(&[vec![0.0, 0.0]], &[vec![true, false]], 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = sentence_prf(&[0.9, 0.8, 0.1], &[true, false, false], 0.5).unwrap();
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(sentence_prf(&[], &[], 0.5).is_err());
        assert!(token_prf(&[vec![0.1]], &[vec![true, false]], 0.5).is_err());
    }

    #[test]
    fn map_hand_cases() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[true, false, true]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.1], &[true, true]), Some(1.0));
        // tie: earlier position ranks first
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert!(matches!(
            token_map(&[vec![0.1]], &[vec![false]]),
            Err(ModelError::Undefined(_))
        ));
    }

    #[test]
    fn t_test_reference() {
        // scipy.stats.ttest_rel([2,4,6,8,10], [1,2,3,4,5])
        let t = paired_t_test(&[2.0, 4.0, 6.0, 8.0, 10.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((t.t - 4.242640687119285).abs() < 1e-12);
        assert!((t.p_value - 0.013235599563682695).abs() < 1e-9);
        assert_eq!(t.df, 4.0);
        let t = paired_t_test(&[0.61, 0.58, 0.64, 0.60, 0.62], &[0.55, 0.57, 0.59, 0.52, 0.6]).unwrap();
        assert!((t.t - 3.415062313107867).abs() < 1e-9);
        assert!((t.p_value - 0.026901909157428953).abs() < 1e-9);
        let same = paired_t_test(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert!(same.undefined_variance);
        assert_eq!(same.p_value, 1.0);
        assert!(paired_t_test(&[0.3], &[0.3]).is_err());
    }

    fn report(method: Method, seed: u64, map: f64) -> MetricsReport {
        MetricsReport {
            method,
            seed: Some(seed),
            threshold: 0.5,
            sentence: Some(Prf::from_counts(1, 0, 0)),
            token: Prf::from_counts(1, 1, 1),
            map,
            global_map: map,
        }
    }

    #[test]
    fn aggregation_and_pairing() {
        let agg = aggregate_seeds(&[report(Method::Soft, 1, 0.5), report(Method::Soft, 2, 0.7)]).unwrap();
        assert!((agg.map - 0.6).abs() < 1e-15);
        let a = [report(Method::Soft, 1, 0.5), report(Method::Soft, 2, 0.7)];
        let b = [report(Method::Head, 1, 0.4), report(Method::Head, 3, 0.6)];
        assert!(compare_methods(&a, &b, |r| r.map).is_err());
        assert!(aggregate_seeds(&[a[0].clone(), b[0].clone()]).is_err());
    }

    #[test]
    fn table_columns_in_order() {
        let agg = aggregate_seeds(&[report(Method::WeightedSoft, 1, 0.5)]).unwrap();
        let t = render_table(&[agg]);
        let header = t.lines().next().unwrap();
        let pos = |s: &str| header.find(s).unwrap();
        assert!(pos("Sent F1") < pos(" F1  ") && pos(" F1  ") < pos("MAP"));
        assert!(t.contains("Weighted soft attention"));
        assert!(t.contains("50.00"));
    }

    #[test]
    fn random_baseline_recall_is_about_half() {
        let sentences: Vec<LabeledSentence> = (0..400)
            .map(|i| LabeledSentence::new(vec!["w".into(); 10], (0..10).map(|j| (i + j) % 3 == 0).collect()))
            .collect();
        let ds = Dataset::new(sentences);
        let a = random_baseline(&ds, 7);
        assert_eq!(a, random_baseline(&ds, 7));
        let r = evaluate(&a, &ds).unwrap();
        let n = ds.stats().positive_words as f64;
        let sd = (0.25 / n).sqrt();
        assert!((r.token.recall - 0.5).abs() < 3.0 * sd, "{}", r.token.recall);
        assert!(r.sentence.is_none());
    }

    fn brute_ap(scores: &[f64], gold: &[bool]) -> f64 {
        // precision at each gold positive's rank, with rank = 1 + number of
        // tokens strictly ahead of it in (score desc, position asc) order
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..scores.len() {
            if !gold[i] {
                continue;
            }
            let ahead = |j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
            let rank = 1 + (0..scores.len()).filter(|&j| ahead(j)).count();
            let pos_in_prefix = 1 + (0..scores.len()).filter(|&j| gold[j] && ahead(j)).count();
            total += pos_in_prefix as f64 / rank as f64;
            count += 1;
        }
        total / count as f64
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 1..20)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 5.0).collect();
            let gold: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            match average_precision(&scores, &gold) {
                None => prop_assert!(!gold.contains(&true)),
                Some(ap) => prop_assert!((ap - brute_ap(&scores, &gold)).abs() < 1e-12),
            }
        }

        #[test]
        fn map_invariant_under_monotone_transform(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..20)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut gold: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            gold[0] = true;
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(token_map(&[scores], &[gold.clone()]).unwrap(), token_map(&[warped], &[gold]).unwrap());
        }

        #[test]
        fn prf_matches_recount(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..30),
            threshold in 0.0f64..1.0
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let gold: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let p = token_prf(&[scores.clone()], &[gold.clone()], threshold).unwrap();
            let tp = (0..scores.len()).filter(|&i| scores[i] > threshold && gold[i]).count();
            let predicted = scores.iter().filter(|&&s| s > threshold).count();
            let actual = gold.iter().filter(|&&g| g).count();
            prop_assert_eq!(p.tp, tp);
            prop_assert_eq!(p.fp, predicted - tp);
            prop_assert_eq!(p.fn_, actual - tp);
            prop_assert_eq!(f1(p.precision, p.recall), f1(p.recall, p.precision));
            prop_assert!((0.0..=1.0).contains(&p.f1));
        }
    }
}
