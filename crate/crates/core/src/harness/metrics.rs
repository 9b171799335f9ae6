//! Accuracy, ROC AUC, sensitivity and specificity.
//!
//! Two classes use the standard definitions with class 1 as the positive
//! class. More classes use one-vs-rest macro averages over the classes that
//! occur in the test labels.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `m[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in labels.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Mann–Whitney AUC: the probability that a random positive outscores a random
/// negative, ties counting one half. `None` without both positives and negatives.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Metrics of one evaluation plus notes on classes left out of the averages.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: ClassificationMetrics,
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Scores `[n, classes]` row-major probabilities against true labels; predictions are the row arg-max.
pub fn evaluate_probabilities(labels: &[usize], probabilities: &[f64], classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if classes < 2 || probabilities.len() != labels.len() * classes {
        return Err(Error::Validation(format!(
            "{} probabilities for {} labels over {classes} classes",
            probabilities.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("label {l} out of range")));
    }
    let rows: Vec<&[f64]> = probabilities.chunks(classes).collect();
    let predicted: Vec<usize> =
        rows.iter().map(|p| p.iter().enumerate().fold(0, |b, (c, &v)| if v > p[b] { c } else { b })).collect();
    let confusion = confusion_matrix(labels, &predicted, classes);
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;
    let mut warnings = Vec::new();

    let one_vs_rest = |c: usize| {
        let tp = confusion[c][c] as f64;
        let pos: usize = confusion[c].iter().sum();
        let predicted_c: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let neg = labels.len() - pos;
        let fp = (predicted_c - confusion[c][c]) as f64;
        let sens = (pos > 0).then(|| tp / pos as f64);
        let spec = (neg > 0).then(|| (neg as f64 - fp) / neg as f64);
        let scores: Vec<f64> = rows.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        (sens, spec, roc_auc(&scores, &positive))
    };

    let metrics = if classes == 2 {
        let (sens, spec, auc) = one_vs_rest(1);
        if sens.is_none() || spec.is_none() {
            warnings.push("test set holds a single class; undefined metrics reported as 0".into());
        }
        ClassificationMetrics {
            accuracy,
            auc: auc.unwrap_or(0.0),
            sensitivity: sens.unwrap_or(0.0),
            specificity: spec.unwrap_or(0.0),
        }
    } else {
        let (mut s, mut p, mut a) = (vec![], vec![], vec![]);
        for c in 0..classes {
            let (sens, spec, auc) = one_vs_rest(c);
            match (sens, auc) {
                (Some(sv), Some(av)) => {
                    s.push(sv);
                    a.push(av);
                    p.extend(spec);
                }
                _ => warnings.push(format!("class {c} absent from the test set; excluded from macro averages")),
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        ClassificationMetrics { accuracy, auc: mean(&a), sensitivity: mean(&s), specificity: mean(&p) }
    };
    Ok(Evaluation { metrics, confusion, warnings })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() < 2 { 0.0 } else { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) };
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn onehot_probs(pred: &[usize], classes: usize) -> Vec<f64> {
        pred.iter().flat_map(|&p| (0..classes).map(move |c| if c == p { 1.0 } else { 0.0 })).collect()
    }

    #[test]
    fn perfect_predictor() {
        let labels = [0, 1, 2, 3, 1, 0];
        let e = evaluate_probabilities(&labels, &onehot_probs(&labels, 4), 4).unwrap();
        assert_eq!(e.metrics, ClassificationMetrics { accuracy: 1.0, auc: 1.0, sensitivity: 1.0, specificity: 1.0 });
    }

    #[test]
    fn constant_predictor_on_balanced_binary() {
        let labels = [0, 1, 0, 1, 0, 1];
        let e = evaluate_probabilities(&labels, &onehot_probs(&[1; 6], 2), 2).unwrap();
        assert_eq!(e.metrics.accuracy, 0.5);
        assert_eq!(e.metrics.sensitivity, 1.0);
        assert_eq!(e.metrics.specificity, 0.0);
        assert_eq!(e.metrics.auc, 0.5);
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let positive: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let auc = roc_auc(&scores, &positive).unwrap();
        assert!((auc - 0.5).abs() <= 0.02, "{auc}");
    }

    #[test]
    fn auc_against_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.4];
        let positive = [false, false, true, true, true, false];
        // oracle: average over every positive/negative pair
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if positive[i] && !positive[j] {
                    s += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    n += 1.0;
                }
            }
        }
        assert_eq!(roc_auc(&scores, &positive).unwrap(), s / n);
        assert_eq!(roc_auc(&[1.0], &[true]), None);
    }

    #[test]
    fn absent_class_is_excluded_with_warning() {
        let labels = [0, 1, 0, 1];
        let e = evaluate_probabilities(&labels, &onehot_probs(&labels, 3), 3).unwrap();
        assert_eq!(e.warnings.len(), 1);
        assert_eq!(e.metrics.sensitivity, 1.0);
        assert!(evaluate_probabilities(&[], &[], 2).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metrics_bounded_and_accuracy_is_confusion_trace(
                rows in prop::collection::vec((0usize..3, prop::collection::vec(0.0..1.0f64, 3)), 1..60)
            ) {
                let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
                let probs: Vec<f64> = rows.iter().flat_map(|r| {
                    let s: f64 = r.1.iter().sum::<f64>() + 1e-9;
                    r.1.iter().map(move |v| v / s).collect::<Vec<_>>()
                }).collect();
                let e = evaluate_probabilities(&labels, &probs, 3).unwrap();
                let m = e.metrics;
                for v in [m.accuracy, m.auc, m.sensitivity, m.specificity] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                let trace: usize = (0..3).map(|c| e.confusion[c][c]).sum();
                prop_assert_eq!(m.accuracy, trace as f64 / labels.len() as f64);
            }

            #[test]
            fn auc_invariant_under_monotone_transform(
                rows in prop::collection::vec((-5.0..5.0f64, any::<bool>()), 2..80)
            ) {
                let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let positive: Vec<bool> = rows.iter().map(|r| r.1).collect();
                let moved: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(roc_auc(&scores, &positive), roc_auc(&moved, &positive));
                let ordered: Vec<bool> = {
                    let mut idx: Vec<usize> = (0..scores.len()).collect();
                    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
                    let k = positive.iter().filter(|&&p| !p).count();
                    let mut out = vec![false; scores.len()];
                    for &i in &idx[k..] { out[i] = true; }
                    out
                };
                let distinct = {
                    let mut s = scores.clone();
                    s.sort_by(f64::total_cmp);
                    s.windows(2).all(|w| w[0] < w[1])
                };
                if distinct {
                    if let Some(a) = roc_auc(&scores, &ordered) { prop_assert_eq!(a, 1.0); }
                }
            }
        }
    }
}
