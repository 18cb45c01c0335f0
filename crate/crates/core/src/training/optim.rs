//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers, one per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamW { config, m, v, t: 0 }
    }

    /// One update. `slots` yields `(index, value, grad, decay)`; slots not
    /// yielded keep their moments untouched.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        slots: impl IntoIterator<Item = (usize, &'a mut [f64], &'a [f64], bool)>,
    ) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, value, grad, decay) in slots {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(value.len(), grad.len());
            assert_eq!(value.len(), m.len());
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if decay {
                    value[j] -= lr * c.weight_decay * value[j];
                }
                value[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step == self.warmup_steps && self.total_steps > step {
                self.base_lr
            } else {
                0.0
            };
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        (self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
    }
}
