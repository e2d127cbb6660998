//! Warmup-cosine learning-rate schedule and decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vtl_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_lr: 1e-6,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.warmup_lr >= 0.0 && self.warmup_lr <= self.peak_lr) {
            return Err(Error::config(format!(
                "warmup_lr {} must lie in [0, peak_lr {}]",
                self.warmup_lr, self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::config("adam betas must be in [0,1) and eps > 0"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay back to `warmup_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimConfig) -> f64 {
    let s = step.min(total_steps);
    let span = cfg.peak_lr - cfg.warmup_lr;
    if s < cfg.warmup_steps {
        return cfg.warmup_lr + span * s as f64 / cfg.warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(cfg.warmup_steps);
    let progress = if decay == 0 {
        0.0
    } else {
        (s - cfg.warmup_steps) as f64 / decay as f64
    };
    cfg.warmup_lr + span * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: u64,
    moments: BTreeMap<usize, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let (m, v) = self.moments.entry(id.index()).or_insert_with(|| {
                (
                    Tensor::zeros(grad.rows(), grad.cols()),
                    Tensor::zeros(grad.rows(), grad.cols()),
                )
            });
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
