use serde::{Deserialize, Serialize};

use super::Dataset;

/// Depth-1 tree voting -1 on the left (`x <= threshold`) or +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stump {
    feature: usize,
    threshold: f64,
    left: f64,
    right: f64,
    alpha: f64,
}

impl Stump {
    fn vote(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.threshold { self.left } else { self.right }
    }
}

/// Discrete two-class AdaBoost (SAMME) over stumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct AdaBoost {
    stumps: Vec<Stump>,
}

/// Weighted-error-minimising stump; `None` when every feature is constant.
fn fit_stump(data: &Dataset, w: &[f64]) -> Option<(Stump, f64)> {
    let total: f64 = w.iter().sum();
    let total_pos: f64 = w.iter().zip(&data.labels).filter(|(_, &y)| y).map(|(w, _)| w).sum();
    let mut best: Option<(Stump, f64)> = None;
    for f in 0..data.n_features() {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data.rows[a][f].total_cmp(&data.rows[b][f]));
        let (mut lpos, mut lneg) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            let i = order[k];
            if data.labels[i] { lpos += w[i] } else { lneg += w[i] }
            let (a, b) = (data.rows[i][f], data.rows[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let rneg = total - total_pos - lneg;
            // Left votes -1, right +1: misses are left positives and right negatives.
            let err_up = (lpos + rneg) / total;
            let (err, left, right) =
                if err_up <= 1.0 - err_up { (err_up, -1.0, 1.0) } else { (1.0 - err_up, 1.0, -1.0) };
            if best.as_ref().is_none_or(|(_, e)| err < *e) {
                best = Some((Stump { feature: f, threshold: (a + b) / 2.0, left, right, alpha: 0.0 }, err));
            }
        }
    }
    best
}

impl AdaBoost {
    pub(crate) fn fit(data: &Dataset, rounds: usize) -> AdaBoost {
        let n = data.len();
        let mut w = vec![1.0 / n as f64; n];
        let mut stumps = Vec::new();
        for _ in 0..rounds {
            let Some((mut stump, err)) = fit_stump(data, &w) else { break };
            if err >= 0.5 {
                break;
            }
            let err = err.max(1e-10);
            stump.alpha = ((1.0 - err) / err).ln();
            for ((wi, x), &label) in w.iter_mut().zip(&data.rows).zip(&data.labels) {
                let y = if label { 1.0 } else { -1.0 };
                if stump.vote(x) != y {
                    *wi *= stump.alpha.exp();
                }
            }
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            let perfect = err <= 1e-10;
            stumps.push(stump);
            if perfect {
                break;
            }
        }
        AdaBoost { stumps }
    }

    pub(crate) fn score(&self, x: &[f64]) -> f64 {
        let total: f64 = self.stumps.iter().map(|s| s.alpha).sum();
        if total <= 0.0 {
            return 0.5;
        }
        let vote: f64 = self.stumps.iter().map(|s| s.alpha * s.vote(x)).sum();
        (vote / total + 1.0) / 2.0
    }
}
