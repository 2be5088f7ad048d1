use nmt_tensor::Float;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::model::ParamStore;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Float = f32> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<F>> = params.iter().map(|(_, t)| vec![F::zero(); t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, config }
    }
}

/// One bias-corrected Adam update. Parameters and moments are untouched if any
/// gradient entry is non-finite.
pub fn adam_step<F: Float>(
    params: &mut ParamStore<F>,
    grads: &[Vec<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return usage(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.at(i).len() {
            return usage(format!("gradient for {} has {} entries, expected {}", params.name(i), g.len(), params.at(i).len()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (F::lit(beta1), F::lit(beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - beta1), F::lit(1.0 - beta2));
    let step_size = F::lit(lr / c1);
    let inv_c2 = F::lit(1.0 / c2);
    let eps = F::lit(eps);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.at_mut(i).data_mut();
        for k in 0..g.len() {
            m[k] = b1 * m[k] + one_b1 * g[k];
            v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
            p[k] = p[k] - step_size * m[k] / ((v[k] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak_lr`, then inverse square-root decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return usage(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps == 0 {
            return usage("warmup_steps must be at least 1");
        }
        Ok(())
    }
}

pub fn lr_at_step(schedule: &LrSchedule, step: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = schedule.warmup_steps as f64;
    if step <= warmup {
        schedule.peak_lr * step / warmup
    } else {
        schedule.peak_lr * (warmup / step).sqrt()
    }
}
