use serde::{Deserialize, Serialize};

use super::LearnerError;

/// Area under the ROC curve as the Mann-Whitney statistic: the share of
/// (viral, non-viral) pairs where the viral item scores higher, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, LearnerError> {
    if scores.len() != labels.len() {
        return Err(LearnerError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LearnerError::NonFinite("score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LearnerError::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of midranks of the positives, doubled to stay in integers.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Accuracy plus macro-averaged precision, recall and F1 over both classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores above 0.5 count as a viral prediction. A class that is never
/// predicted gets precision 0.
pub fn classification_metrics(scores: &[f64], labels: &[bool]) -> ClassificationMetrics {
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > 0.5, y) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = |hit: usize, wrong_pred: usize, missed: usize| {
        let p = ratio(hit, hit + wrong_pred);
        let r = ratio(hit, hit + missed);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    };
    let (p1, r1, f1) = per_class(tp, fp, fneg);
    let (p0, r0, f0) = per_class(tn, fneg, fp);
    ClassificationMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        precision: (p1 + p0) / 2.0,
        recall: (r1 + r0) / 2.0,
        f1: (f1 + f0) / 2.0,
    }
}
