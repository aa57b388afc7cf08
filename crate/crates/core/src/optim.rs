//! Learning-rate schedule, AdamW, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index} has shape {param:?} but gradient has shape {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("expected {expected} tensors, got {got}")]
    CountMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            floor_lr: 1e-7,
            warmup_fraction: 0.05,
        }
    }
}

/// Linear warmup from `floor_lr` to `peak_lr` over the first
/// `warmup_fraction · total` steps, then cosine annealing back to `floor_lr`
/// at `total`.
pub fn lr_at(step: u64, total: u64, cfg: &ScheduleConfig) -> f64 {
    let (peak, floor) = (cfg.peak_lr, cfg.floor_lr);
    let s = step.min(total) as f64;
    let warmup = cfg.warmup_fraction * total as f64;
    if s < warmup {
        return floor + (peak - floor) * s / warmup;
    }
    let span = total as f64 - warmup;
    if span <= 0.0 {
        return peak;
    }
    let progress = (s - warmup) / span;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with bias-corrected moments. Decoupled decay `p ← p·(1 − lr·λ)` is
/// applied to decayed tensors before the adaptive update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        decay: &[bool],
        lr: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != params.len() || decay.len() != params.len() {
            return Err(OptimError::CountMismatch {
                expected: params.len(),
                got: grads.len().min(decay.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    index: i,
                    param: p.shape(),
                    grad: g.shape(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let shrink = if decay[i] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w *= shrink;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}
