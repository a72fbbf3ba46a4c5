//! AdamW with decoupled weight decay and the warmup-cosine schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers in parameter declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OptimState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of every parameter from its accumulated gradient.
/// Fails before touching any parameter if a gradient is non-finite.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.grad.numel() != m.len() || p.value.numel() != m.len() {
            return Err(Error::Config(format!(
                "optimizer buffer for {} has the wrong size",
                p.name
            )));
        }
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} is not finite",
                p.name
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.floor_lr.is_nan() || self.floor_lr > self.peak_lr || self.floor_lr < 0.0 {
            return Err(Error::Config(format!(
                "floor lr {} must lie in [0, peak {}]",
                self.floor_lr, self.peak_lr
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the floor.
pub fn lr_schedule(step: u64, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond total {}",
            spec.total_steps
        )));
    }
    if step < spec.warmup_steps {
        return Ok(spec.peak_lr * step as f64 / spec.warmup_steps as f64);
    }
    let span = spec.total_steps - spec.warmup_steps;
    if span == 0 {
        return Ok(spec.peak_lr);
    }
    let progress = (step - spec.warmup_steps) as f64 / span as f64;
    Ok(spec.floor_lr
        + (spec.peak_lr - spec.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
