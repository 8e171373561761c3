//! Adam with decoupled weight decay and a one-cycle learning-rate schedule.
//!
//! The optimizer works on the model's flat parameter vector. Each step
//! computes one additive update per entry and applies it with a single
//! addition, so replaying recorded updates reproduces parameter values
//! bit-for-bit.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn default_warmup() -> f64 {
    0.1
}
fn default_final() -> f64 {
    0.01
}

/// Learning-rate shape over one task's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    /// The configured rate at every step.
    Constant,
    /// Linear warmup to the peak, then cosine decay to peak*final_frac.
    OneCycle {
        #[serde(default = "default_warmup")]
        warmup_frac: f64,
        #[serde(default = "default_final")]
        final_frac: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::OneCycle {
            warmup_frac: default_warmup(),
            final_frac: default_final(),
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::OneCycle {
            warmup_frac,
            final_frac,
        } = self
        {
            if !(0.0..1.0).contains(warmup_frac) {
                return Err(Error::config(format!(
                    "one-cycle warmup_frac must be in [0, 1), got {warmup_frac}"
                )));
            }
            if !(0.0..=1.0).contains(final_frac) {
                return Err(Error::config(format!(
                    "one-cycle final_frac must be in [0, 1], got {final_frac}"
                )));
            }
        }
        Ok(())
    }

    /// Rate for 0-based `step` out of `total_steps`.
    pub fn rate(&self, peak: f64, step: u64, total_steps: u64) -> f64 {
        match *self {
            LrSchedule::Constant => peak,
            LrSchedule::OneCycle {
                warmup_frac,
                final_frac,
            } => {
                let total = total_steps.max(1) as f64;
                let p = (step as f64 / total).min(1.0);
                if p < warmup_frac {
                    peak * (p / warmup_frac)
                } else {
                    let floor = peak * final_frac;
                    let q = if warmup_frac < 1.0 {
                        (p - warmup_frac) / (1.0 - warmup_frac)
                    } else {
                        1.0
                    };
                    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * q).cos())
                }
            }
        }
    }
}

/// Fresh per task: expansion changes the parameter count, and each task is
/// its own optimization run.
pub struct AdamOptimizer {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    total_steps: u64,
    peak_lr: f64,
    weight_decay: f64,
    decay_mask: Vec<bool>,
    schedule: LrSchedule,
}

impl AdamOptimizer {
    pub fn new(
        num_params: usize,
        decay_mask: Vec<bool>,
        peak_lr: f64,
        weight_decay: f64,
        schedule: LrSchedule,
        total_steps: u64,
    ) -> Result<Self> {
        if decay_mask.len() != num_params {
            return Err(Error::shape(
                "optimizer decay mask",
                format!("{num_params}"),
                format!("{}", decay_mask.len()),
            ));
        }
        if peak_lr <= 0.0 || !peak_lr.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {peak_lr}"
            )));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight_decay must be nonnegative, got {weight_decay}"
            )));
        }
        schedule.validate()?;
        Ok(AdamOptimizer {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step_count: 0,
            total_steps,
            peak_lr,
            weight_decay,
            decay_mask,
            schedule,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule
            .rate(self.peak_lr, self.step_count, self.total_steps)
    }

    /// Applies one update in place. `traced` lists flat indices whose
    /// additive updates are returned, in the same order, for provenance
    /// replay; pass an empty slice to skip recording.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        traced: &[usize],
    ) -> Result<Vec<f64>> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} parameters", self.m.len()),
                format!("{} / {}", params.len(), grads.len()),
            ));
        }
        let lr = self.current_lr();
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut updates = vec![0.0; params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut u = -lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if self.decay_mask[i] && self.weight_decay > 0.0 {
                u -= lr * self.weight_decay * params[i];
            }
            params[i] += u;
            updates[i] = u;
        }
        Ok(traced.iter().map(|&i| updates[i]).collect())
    }
}
