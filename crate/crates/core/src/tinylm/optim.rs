use std::f64::consts::PI;

use crate::error::Result;
use crate::linalg::Scalar;
use crate::params::ParamSet;

/// Linear warmup to `peak`, then cosine decay to `peak · min_ratio` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_ratio: f64,
}

impl LrSchedule {
    /// Learning rate for a 1-based step.
    pub fn at(&self, step: usize) -> f64 {
        let step = step.max(1);
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Rescale `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_by_global_norm<T: Scalar, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / (norm + 1e-12)));
    }
    norm
}

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    step: usize,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: ParamSet<T>>(params: &P, beta1: f64, beta2: f64, weight_decay: f64, grad_clip: f64) -> Self {
        let n = params.num_params();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. Non-finite gradients abort before anything is modified.
    /// Returns the pre-clip gradient norm.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &mut P, lr: f64) -> Result<f64> {
        grads.check_finite()?;
        let norm = clip_by_global_norm(grads, self.grad_clip);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let flat = grads.flatten();
        let (m, v) = (&mut self.m, &mut self.v);
        let (eps, wd) = (self.eps, self.weight_decay);
        let mut off = 0;
        params.visit_mut(&mut |_, shape, data| {
            let decay = if shape.len() >= 2 { wd } else { 0.0 };
            for (j, p) in data.iter_mut().enumerate() {
                let i = off + j;
                let g = flat[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let pv = p.f64();
                *p = T::of(pv - lr * (update + decay * pv));
            }
            off += data.len();
        });
        Ok(norm)
    }
}
