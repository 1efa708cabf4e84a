//! Decoupled-weight-decay Adam and the warm-up/cosine learning-rate schedule.

use std::f64::consts::PI;

use imitate_autodiff::Tensor;

use crate::config::TrainConfig;

/// Adam with weight decay applied directly to the parameters, scaled by the
/// step's learning rate. Decay only touches matrices and kernels (rank ≥ 2).
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= decay * *w + lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear ramp from 0 over the first `warmup` steps, then cosine decay
/// from `base` to 0 at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(base: f64, warmup_frac: f64, total: usize) -> Self {
        let warmup = ((warmup_frac * total as f64).floor() as usize).min(total.saturating_sub(1));
        Self { base, warmup, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(1).saturating_sub(self.warmup);
        if span == 0 {
            return self.base;
        }
        let progress = (step - self.warmup).min(span) as f64 / span as f64;
        self.base * 0.5 * (1.0 + (PI * progress).cos())
    }
}
