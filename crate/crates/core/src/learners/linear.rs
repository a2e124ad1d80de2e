use serde::{Deserialize, Serialize};

use super::Dataset;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Weights and bias scored through the logistic link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }
}

/// Mean log-loss plus `lambda / 2 * |w|^2`; the bias is not penalised.
pub fn logistic_objective(w: &[f64], b: f64, rows: &[Vec<f64>], labels: &[bool], lambda: f64) -> f64 {
    let n = rows.len() as f64;
    let loss: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = dot(w, x) + b;
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum::<f64>()
        / n;
    loss + 0.5 * lambda * dot(w, w)
}

/// Gradient of [`logistic_objective`] with respect to `(w, b)`.
pub fn logistic_gradient(
    w: &[f64],
    b: f64,
    rows: &[Vec<f64>],
    labels: &[bool],
    lambda: f64,
) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
    let mut gb = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let r = (sigmoid(dot(w, x) + b) - y as u8 as f64) / n;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    (gw, gb)
}

/// Full-batch gradient descent with step `1 / L`, where `L` bounds the
/// curvature of the objective, so the loss never increases. Returns the
/// model and the objective after each epoch.
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[bool], lambda: f64, epochs: usize) -> (LinearModel, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let mean_sq = rows.iter().map(|x| dot(x, x) + 1.0).sum::<f64>() / rows.len() as f64;
    let step = 1.0 / (0.25 * mean_sq + lambda);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (gw, gb) = logistic_gradient(&w, b, rows, labels, lambda);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb;
        history.push(logistic_objective(&w, b, rows, labels, lambda));
    }
    (LinearModel { weights: w, bias: b }, history)
}

fn svm_objective(w: &[f64], b: f64, data: &Dataset, lambda: f64) -> f64 {
    let hinge: f64 = data
        .rows
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let y = if y { 1.0 } else { -1.0 };
            (1.0 - y * (dot(w, x) + b)).max(0.0)
        })
        .sum::<f64>()
        / data.len() as f64;
    0.5 * lambda * dot(w, w) + hinge
}

/// Soft-margin linear SVM by full-batch subgradient descent on
/// `lambda / 2 * |w|^2 + mean hinge` with `lambda = 1 / (C n)`. Subgradient
/// steps are not monotone, so the best iterate seen is kept.
pub(crate) fn fit_svm(data: &Dataset, c: f64, epochs: usize, eta0: f64) -> LinearModel {
    let n = data.len() as f64;
    let lambda = 1.0 / (c * n);
    let d = data.n_features();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = (svm_objective(&w, b, data, lambda), w.clone(), b);
    for t in 0..epochs {
        let mut gw: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
        let mut gb = 0.0;
        for (x, &y) in data.rows.iter().zip(&data.labels) {
            let y = if y { 1.0 } else { -1.0 };
            if y * (dot(&w, x) + b) < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= y * xi / n;
                }
                gb -= y / n;
            }
        }
        let eta = eta0 / ((t + 1) as f64).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= eta * g;
        }
        b -= eta * gb;
        let obj = svm_objective(&w, b, data, lambda);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    LinearModel { weights: best.1, bias: best.2 }
}
