use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::train::softmax_row;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
        }
    }
}

/// Multinomial logistic regression on frozen, standardized feature vectors,
/// fit by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    dim: usize,
    classes: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[dim, classes]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// Training loss after each iteration.
    pub loss_trace: Vec<f64>,
}

/// Gradient norm under which a non-decreasing loss still counts as converged
/// (the probe sits at a stationary point).
const STATIONARY_GRAD: f64 = 1e-6;

impl LinearProbe {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        config: &ProbeConfig,
    ) -> Result<Self, MetricsError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(MetricsError::Empty("probe training set"));
        }
        if classes < 2 || labels.iter().any(|&y| y >= classes) {
            return Err(MetricsError::Invalid("probe labels outside 0..classes".into()));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for f in features {
            var.iter_mut().zip(f).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
        }
        let inv_std = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let mut probe = Self {
            dim,
            classes,
            mean,
            inv_std,
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            loss_trace: Vec::with_capacity(config.iterations),
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let mut grad_norm = 0.0;
        for _ in 0..config.iterations {
            let mut gw = vec![0.0; dim * classes];
            let mut gb = vec![0.0; classes];
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let p = softmax_row(&probe.logits_std(x));
                loss -= p[y].max(1e-300).ln();
                for c in 0..classes {
                    let d = (p[c] - f64::from(c == y)) / n;
                    gb[c] += d;
                    for (i, xi) in x.iter().enumerate() {
                        gw[i * classes + c] += d * xi;
                    }
                }
            }
            probe.loss_trace.push(loss / n);
            grad_norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
            probe.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= config.lr * g);
            probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= config.lr * g);
        }
        probe.check_converged(grad_norm)?;
        Ok(probe)
    }

    /// Fails when the loss did not decrease over the final 10% of
    /// iterations while the gradient is still non-negligible.
    fn check_converged(&self, grad_norm: f64) -> Result<(), MetricsError> {
        let t = &self.loss_trace;
        if t.len() < 10 {
            return Ok(());
        }
        let start = t[t.len() - 1 - t.len() / 10];
        let end = *t.last().unwrap();
        if !end.is_finite() || (end >= start && grad_norm > STATIONARY_GRAD) {
            return Err(MetricsError::ProbeNotConverged { start, end });
        }
        Ok(())
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.classes..(i + 1) * self.classes];
            z.iter_mut().zip(row).for_each(|(z, w)| *z += xi * w);
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn probs(&self, feature: &[f64]) -> Vec<f64> {
        softmax_row(&self.logits_std(&self.standardize(feature)))
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn predict(&self, feature: &[f64]) -> usize {
        let p = self.probs(feature);
        (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
    }
}
