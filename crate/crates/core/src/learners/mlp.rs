use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::sigmoid;
use super::Dataset;

/// One hidden layer of logistic units feeding a logistic output, trained
/// by full-batch gradient descent on cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Mlp {
    /// All weights and biases zero: every input scores exactly 0.5.
    pub fn zeroed(n_inputs: usize, hidden: usize) -> Mlp {
        Mlp { w1: vec![vec![0.0; n_inputs]; hidden], b1: vec![0.0; hidden], w2: vec![0.0; hidden], b2: 0.0 }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(w, b)| sigmoid(w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b))
            .collect()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let h = self.hidden(x);
        sigmoid(h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>() + self.b2)
    }

    pub(crate) fn fit<R: Rng>(
        data: &Dataset,
        hidden: usize,
        epochs: usize,
        lr: f64,
        init_scale: f64,
        rng: &mut R,
    ) -> Mlp {
        let d = data.n_features();
        let mut uniform = || if init_scale > 0.0 { rng.gen_range(-init_scale..=init_scale) } else { 0.0 };
        let mut m = Mlp::zeroed(d, hidden);
        for row in &mut m.w1 {
            row.iter_mut().for_each(|w| *w = uniform());
        }
        m.w2.iter_mut().for_each(|w| *w = uniform());

        let n = data.len() as f64;
        for _ in 0..epochs {
            let mut g1 = vec![vec![0.0; d]; hidden];
            let mut gb1 = vec![0.0; hidden];
            let mut g2 = vec![0.0; hidden];
            let mut gb2 = 0.0;
            for (x, &y) in data.rows.iter().zip(&data.labels) {
                let h = m.hidden(x);
                let out = sigmoid(h.iter().zip(&m.w2).map(|(a, b)| a * b).sum::<f64>() + m.b2);
                let delta = (out - y as u8 as f64) / n;
                gb2 += delta;
                for j in 0..hidden {
                    g2[j] += delta * h[j];
                    let dh = delta * m.w2[j] * h[j] * (1.0 - h[j]);
                    gb1[j] += dh;
                    for (g, xi) in g1[j].iter_mut().zip(x) {
                        *g += dh * xi;
                    }
                }
            }
            for j in 0..hidden {
                for (w, g) in m.w1[j].iter_mut().zip(&g1[j]) {
                    *w -= lr * g;
                }
                m.b1[j] -= lr * gb1[j];
                m.w2[j] -= lr * g2[j];
            }
            m.b2 -= lr * gb2;
        }
        m
    }
}
