use serde::{Deserialize, Serialize};

use super::Dataset;

/// Nearest-neighbour vote under L1 distance, which is Hamming distance on
/// the binary slots and absolute difference on the coded ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Knn {
    k: usize,
    rows: Vec<Vec<f64>>,
    labels: Vec<bool>,
}

impl Knn {
    pub(crate) fn fit(data: &Dataset, k: usize) -> Knn {
        Knn { k: k.clamp(1, data.len()), rows: data.rows.clone(), labels: data.labels.clone() }
    }

    /// Viral fraction among the `k` nearest points. Every point tied with
    /// the k-th distance votes too, so the score never depends on row order.
    pub(crate) fn score(&self, x: &[f64]) -> f64 {
        let mut d: Vec<(f64, bool)> = self
            .rows
            .iter()
            .zip(&self.labels)
            .map(|(r, &y)| (r.iter().zip(x).map(|(a, b)| (a - b).abs()).sum(), y))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let radius = d[self.k - 1].0;
        let (hits, n) = d
            .iter()
            .take_while(|(dist, _)| *dist <= radius)
            .fold((0usize, 0usize), |(h, n), (_, y)| (h + *y as usize, n + 1));
        hits as f64 / n as f64
    }
}
