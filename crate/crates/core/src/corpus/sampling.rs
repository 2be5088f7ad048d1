use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Sampling distribution over directions: q_i ∝ p_i^{1/T} with p_i = |L_i| / Σ|L_j|.
pub fn compute_sampling_probs(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return usage("every direction needs at least one sentence pair");
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return usage(format!("temperature must be positive, got {temperature}"));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    if temperature == 1.0 {
        return Ok(sizes.iter().map(|&s| s as f64 / total).collect());
    }
    // log domain keeps large T and tiny p well conditioned
    let logs: Vec<f64> = sizes.iter().map(|&s| ((s as f64).ln() - total.ln()) / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Dynamic temperature warmup: T_i = min(T, T0 + i/N · (T − T0)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSchedule {
    pub t0: f64,
    pub t_peak: f64,
    pub warmup_epochs: usize,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        Self { t0: 1.0, t_peak: 5.0, warmup_epochs: 5 }
    }
}

impl SamplingSchedule {
    pub fn new(t0: f64, t_peak: f64, warmup_epochs: usize) -> Result<Self> {
        let s = Self { t0, t_peak, warmup_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return usage(format!("t0 must be positive, got {}", self.t0));
        }
        if !(self.t_peak >= self.t0 && self.t_peak.is_finite()) {
            return usage(format!("t_peak ({}) must be at least t0 ({})", self.t_peak, self.t0));
        }
        if self.warmup_epochs == 0 {
            return usage("warmup_epochs must be at least 1");
        }
        Ok(())
    }

    /// A schedule that stays at `t` forever.
    pub fn constant(t: f64) -> Self {
        Self { t0: t, t_peak: t, warmup_epochs: 1 }
    }
}

pub fn temperature_at_epoch(schedule: &SamplingSchedule, epoch: usize) -> f64 {
    // exact peak once warmup ends; the ramp can land an ulp short
    if epoch >= schedule.warmup_epochs {
        return schedule.t_peak;
    }
    let ramp = schedule.t0 + epoch as f64 * (schedule.t_peak - schedule.t0) / schedule.warmup_epochs as f64;
    ramp.min(schedule.t_peak)
}

/// Optimizer steps per epoch: one pass over all pairs at the effective batch size.
pub fn steps_per_epoch(total_pairs: usize, batch_size: usize, accumulation: usize) -> usize {
    total_pairs.div_ceil((batch_size * accumulation).max(1)).max(1)
}
