use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};

/// Momentum SGD with weight decay and inverse-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule_alpha: f64,
    pub schedule_beta: f64,
    pub total_iters: usize,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule_alpha: 10.0,
            schedule_beta: 0.75,
            total_iters: 3000,
            nesterov: false,
        }
    }
}

impl SgdConfig {
    /// `base_lr · (1 + α·i/N)^(−β)`
    pub fn lr_at(&self, iter: usize) -> f64 {
        let progress = iter as f64 / self.total_iters.max(1) as f64;
        self.base_lr * (1.0 + self.schedule_alpha * progress).powf(-self.schedule_beta)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err("base_lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        if !(self.schedule_alpha > 0.0 && self.schedule_beta > 0.0) {
            return Err("schedule_alpha and schedule_beta must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer state: one momentum buffer per parameter, created lazily.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: Vec::new(),
        }
    }

    /// Updates only the listed parameters from their accumulated gradients.
    /// Parameters not listed keep their values and momentum untouched.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], iter: usize) {
        let lr = self.config.lr_at(iter);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        for &id in ids {
            let p = store.get_mut(id);
            let step = lr * p.lr_mult;
            let (values, grad) = split(&mut p.tensor);
            let d: Vec<f64> = grad
                .iter()
                .zip(values.iter())
                .map(|(g, w)| g + wd * w)
                .collect();
            if mu == 0.0 {
                values.iter_mut().zip(&d).for_each(|(w, d)| *w -= step * d);
                continue;
            }
            let slot = &mut self.buffers[id.0];
            let first = slot.is_none();
            let buf = slot.get_or_insert_with(|| vec![0.0; d.len()]);
            for ((w, b), d) in values.iter_mut().zip(buf.iter_mut()).zip(&d) {
                *b = if first { *d } else { mu * *b + d };
                let upd = if self.config.nesterov { d + mu * *b } else { *b };
                *w -= step * upd;
            }
        }
    }

    pub fn buffers(&self) -> &[Option<Vec<f64>>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Option<Vec<f64>>>) {
        self.buffers = buffers;
    }
}

fn split(t: &mut super::Tensor) -> (&mut [f64], Vec<f64>) {
    let g = t.grad().to_vec();
    (t.values_mut(), g)
}
