use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Linear SVM trained with the Pegasos stochastic sub-gradient method. The
/// bias is learned as the weight of a constant feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub(crate) fn fit(x: &[&[f64]], y: &[bool], lambda: f64, epochs: usize, rng: &mut ChaCha8Rng) -> LinearSvm {
        let width = x.first().map_or(0, |r| r.len());
        let mut w = vec![0.0; width + 1];
        let radius = 1.0 / lambda.sqrt();
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut t = 0u64;
        for _ in 0..epochs {
            order.shuffle(rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let label = if y[i] { 1.0 } else { -1.0 };
                let margin = label * (dot(&w[..width], x[i]) + w[width]);
                let shrink = 1.0 - eta * lambda;
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (wj, xj) in w.iter_mut().zip(x[i]) {
                        *wj += eta * label * xj;
                    }
                    w[width] += eta * label;
                }
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    let s = radius / norm;
                    w.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let bias = w.pop().unwrap_or(0.0);
        LinearSvm { weights: w, bias }
    }

    pub fn margin(&self, row: &[f64]) -> f64 {
        dot(&self.weights, row) + self.bias
    }

    /// Logistic squashing of the margin.
    pub fn probability(&self, row: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.margin(row)).exp())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
