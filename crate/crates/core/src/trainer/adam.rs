//! Adam with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to at most this global L2 norm. `None` disables
    /// clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "Adam eps must be positive and weight decay non-negative".into(),
            ));
        }
        if let Some(c) = self.grad_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// What happened during one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamReport {
    /// Set when the gradient had a non-finite entry; nothing was changed.
    pub skipped: bool,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Applies one update to `params` in place.
pub fn adam_update(
    params: &mut [f64],
    state: &mut AdamState,
    grads: &[f64],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<AdamReport> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for g in grads {
        sq += g * g;
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Ok(AdamReport {
            skipped: true,
            grad_norm,
        });
    }
    let scale = match cfg.grad_clip_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(AdamReport {
        skipped: false,
        grad_norm,
    })
}

/// Linear warmup over the first `warmup_fraction` of `total_steps`, then
/// cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.total_steps as f64).ceil() as usize;
        if step < warmup {
            return self.peak * (step + 1) as f64 / warmup as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
