//! Classification metrics. Rates are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// No item was predicted as this class; precision is reported as 0.
    pub precision_undefined: bool,
    /// No item of this class is present; recall is reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

pub fn confusion_metrics(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<ConfusionMetrics> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Precondition("truth and prediction lengths differ".into()));
    }
    let k = class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::Precondition(format!("class index out of range for {k} classes")));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = (0..k).map(|t| confusion[t][c]).sum();
            let precision = if predicted_c == 0 { 0.0 } else { 100.0 * tp as f64 / predicted_c as f64 };
            let recall = if support == 0 { 0.0 } else { 100.0 * tp as f64 / support as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                class: class_names[c].clone(),
                precision,
                recall,
                f1,
                support,
                precision_undefined: predicted_c == 0,
                recall_undefined: support == 0,
            }
        })
        .collect();
    Ok(ConfusionMetrics { accuracy: 100.0 * correct as f64 / truth.len() as f64, confusion, per_class })
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Precondition("scores and labels lengths differ".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, as a percentage.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    // walk groups from the highest score: each positive beats every negative
    // in lower groups and ties with negatives in its own group
    let mut negatives_below = neg;
    let mut twice_wins = 0u128;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        let n = g.len() - p;
        negatives_below -= n;
        twice_wins += (p * (2 * negatives_below + n)) as u128;
    }
    Ok(twice_wins as f64 / 2.0 / (pos * neg) as f64 * 100.0)
}

/// Macro average of one-vs-rest AUROC over the classes that have both
/// positives and negatives.
pub fn multiclass_auroc(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    let k = probs.first().map_or(0, Vec::len);
    let mut values = Vec::new();
    for c in 0..k {
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        match auroc(&scores, &labels) {
            Ok(v) => values.push(v),
            Err(Error::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::SingleClass);
    }
    if k == 2 {
        // both one-vs-rest problems are the same ranking; keep the positive class
        return Ok(values[values.len() - 1]);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One point per distinct score, thresholds descending, recall and
/// precision as fractions.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let (pos, _) = check_binary(scores, labels)?;
    let (mut tp, mut seen) = (0usize, 0usize);
    Ok(tie_groups(scores)
        .into_iter()
        .map(|g| {
            tp += g.iter().filter(|&&i| labels[i]).count();
            seen += g.len();
            PrPoint { threshold: scores[g[0]], recall: tp as f64 / pos as f64, precision: tp as f64 / seen as f64 }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        fp += g.len() - p;
        points.push(RocPoint { threshold: scores[g[0]], fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        ["real", "fake", "c2", "c3"][..k].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_counted_confusion() {
        // fake is class 1: TP=3, FP=1, FN=1, TN=5
        let truth = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let pred = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let m = confusion_metrics(&truth, &pred, &names(2)).unwrap();
        let fake = &m.per_class[1];
        assert!((fake.precision - 75.0).abs() < 1e-9 && (fake.recall - 75.0).abs() < 1e-9 && (fake.f1 - 75.0).abs() < 1e-9);
        assert!((m.accuracy - 80.0).abs() < 1e-9);
    }

    #[test]
    fn all_correct_and_single_class() {
        let t = [0, 1, 0, 1, 1, 0, 0, 1, 1, 0];
        let m = confusion_metrics(&t, &t, &names(2)).unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert!(m.per_class.iter().all(|c| c.f1 == 100.0));

        let m = confusion_metrics(&[0, 0, 0], &[0, 0, 0], &names(2)).unwrap();
        assert_eq!(m.per_class[0].recall, 100.0);
        let fake = &m.per_class[1];
        assert!(fake.precision_undefined && fake.recall_undefined && fake.f1 == 0.0);
        assert!(matches!(confusion_metrics(&[], &[], &names(2)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 100.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 75.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 50.0);
    }

    #[test]
    fn multiclass_reductions() {
        let probs = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8]];
        let truth = [0, 1, 1, 0];
        let binary = auroc(&[0.1, 0.7, 0.4, 0.8], &[false, true, true, false]).unwrap();
        assert_eq!(multiclass_auroc(&probs, &truth).unwrap(), binary);

        let separable = vec![vec![0.7, 0.1, 0.2], vec![0.1, 0.8, 0.1], vec![0.2, 0.1, 0.7]];
        assert_eq!(multiclass_auroc(&separable, &[0, 1, 2]).unwrap(), 100.0);
        assert!(matches!(multiclass_auroc(&separable, &[1, 1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn pr_curve_examples() {
        let pts = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        let expected = [(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0), (1.0, 0.5)];
        assert_eq!(pts.len(), 4);
        for (p, (r, pr)) in pts.iter().zip(expected) {
            assert!((p.recall - r).abs() < 1e-12 && (p.precision - pr).abs() < 1e-12);
        }
        let flat = pr_curve(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert_eq!(flat.len(), 1);
        assert_eq!((flat[0].recall, flat[0].precision), (1.0, 0.25));
        let perfect = pr_curve(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert!(perfect.iter().any(|p| p.recall == 1.0 && p.precision == 1.0));
    }

    #[test]
    fn roc_ends_at_one() {
        let pts = roc_curve(&[0.3, 0.9, 0.6], &[false, true, true]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
