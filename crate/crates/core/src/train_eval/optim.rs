use crate::autodiff::{Scalar, Tensor};

use super::{Optimizer, TrainConfig};

/// One-cycle schedule: cosine ramp from `max_lr / initial_div` up to
/// `max_lr` at step `round(warmup_fraction * total_steps)`, then cosine decay to
/// `max_lr / final_div` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.max_lr / cfg.initial_div;
    let end = cfg.max_lr / cfg.final_div;
    let last = total_steps.saturating_sub(1);
    let peak = ((cfg.warmup_fraction * total_steps as f64).round() as usize).min(last);
    let cos = |from: f64, to: f64, pct: f64| {
        if pct >= 1.0 {
            return to;
        }
        to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * pct).cos())
    };
    if step <= peak {
        if peak == 0 {
            return cfg.max_lr;
        }
        cos(start, cfg.max_lr, step as f64 / peak as f64)
    } else {
        cos(cfg.max_lr, end, (step - peak) as f64 / (last - peak) as f64)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam, or AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(kind: Optimizer, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: match kind {
                Optimizer::Adam => 0.0,
                Optimizer::AdamW { weight_decay } => weight_decay,
            },
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x = *x * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}
