use serde::{Deserialize, Serialize};

use super::GradientSet;
use crate::error::{Error, Result};
use crate::nnmodel::ModelParams;
use crate::scalar::Scalar;

/// Optimiser, schedule and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Slides per optimiser step; gradients are averaged over the batch.
    pub batch: usize,
    pub subsample_max: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            max_epochs: 200,
            patience: 20,
            clip_norm: 1.0,
            batch: 1,
            subsample_max: 4096,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("max_epochs", self.max_epochs > 0),
            ("clip_norm", self.clip_norm > 0.0),
            ("batch", self.batch > 0),
            ("subsample_max", self.subsample_max > 0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::invalid(format!("train.{name} is out of range"))),
            None => Ok(()),
        }
    }
}

/// Linear warmup to `base`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Rate for 1-based optimiser step `t`.
    pub fn lr(&self, t: usize) -> f64 {
        let (w, total) = (self.warmup_steps, self.total_steps.max(self.warmup_steps));
        if t <= w {
            return self.base * t as f64 / w as f64;
        }
        if total == w {
            return self.base;
        }
        let progress = ((t - w) as f64 / (total - w) as f64).min(1.0);
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: GradientSet<T>,
    pub v: GradientSet<T>,
    pub step: usize,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
            step: 0,
        }
    }
}

/// Clips `grads` to `cfg.clip_norm`, then applies one AdamW update with
/// decoupled weight decay. Returns the learning rate used and the
/// pre-clip gradient norm.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &mut GradientSet<T>,
    state: &mut AdamWState<T>,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> (f64, T) {
    let norm = grads.clip(T::lit(cfg.clip_norm));
    state.step += 1;
    let t = state.step;
    let lr = schedule.lr(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
    let decay = T::one() - lr_t * T::lit(cfg.weight_decay);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m.tensors)
        .zip(&mut state.v.tensors)
    {
        ndarray::Zip::from(&mut p.value)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = *p * decay - lr_t * step;
            });
    }
    (lr, norm)
}
