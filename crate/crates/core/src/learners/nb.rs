use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassStats {
    log_prior: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl ClassStats {
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        let ll: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((xi, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi - m).powi(2) / v))
            .sum();
        self.log_prior + ll
    }
}

/// Gaussian naive Bayes. Every variance is padded by `var_smoothing` times
/// the largest feature variance so constant features stay usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct GaussianNb {
    viral: ClassStats,
    nonviral: ClassStats,
}

fn column_stats(rows: &[&Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

impl GaussianNb {
    pub(crate) fn fit(data: &Dataset, var_smoothing: f64) -> GaussianNb {
        let d = data.n_features();
        let all: Vec<&Vec<f64>> = data.rows.iter().collect();
        let (_, overall) = column_stats(&all, d);
        let max_var = overall.iter().copied().fold(0.0, f64::max);
        let eps = var_smoothing * if max_var > 0.0 { max_var } else { 1.0 };

        let class = |want: bool| {
            let rows: Vec<&Vec<f64>> =
                data.rows.iter().zip(&data.labels).filter(|(_, &y)| y == want).map(|(r, _)| r).collect();
            let (mean, var) = column_stats(&rows, d);
            ClassStats {
                log_prior: (rows.len() as f64 / data.len() as f64).ln(),
                mean,
                var: var.into_iter().map(|v| v + eps).collect(),
            }
        };
        GaussianNb { viral: class(true), nonviral: class(false) }
    }

    /// Posterior probability of the viral class.
    pub(crate) fn score(&self, x: &[f64]) -> f64 {
        let gap = self.nonviral.log_likelihood(x) - self.viral.log_likelihood(x);
        super::linear::sigmoid(-gap)
    }
}
