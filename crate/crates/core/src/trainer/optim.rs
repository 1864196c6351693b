//! AdamW with decoupled weight decay, and warmup + decay learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl AdamWState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl AdamW {
    /// One update of `params` in place.
    ///
    /// Weight decay is applied as `p ← p − lr·wd·p` before the adaptive step.
    /// A gradient with any non-finite entry is rejected and leaves both the
    /// parameters and the state untouched.
    pub fn step(
        &self,
        params: &mut Tensor,
        grads: &Tensor,
        state: &mut AdamWState,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        if params.shape() != grads.shape() || params.shape() != state.m.shape() {
            return Err(TrainError::ShapeMismatch {
                params: params.shape().to_vec(),
                grads: grads.shape().to_vec(),
                state: state.m.shape().to_vec(),
            });
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        state.t += 1;
        let t = state.t as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for (((p, &g), m), v) in params
            .data_mut()
            .iter_mut()
            .zip(grads.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *p -= lr * weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown scheduler `{other}` (expected cosine or linear)")),
        }
    }
}

/// Number of warmup steps, `⌈warmup_ratio · total⌉`.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    // the small offset keeps products like 0.7 * 10 = 7.000000000000001 at 7
    ((warmup_ratio * total_steps as f64) - 1e-9).ceil().max(0.0) as u64
}

/// Learning-rate multiplier in `[0, 1]`.
///
/// Rises linearly from 0 over the warmup steps, reaches 1 at the end of
/// warmup, then decays to 0 at `total_steps`, linearly or along a half cosine.
pub fn lr_schedule(
    step: u64,
    total_steps: u64,
    warmup_ratio: f64,
    kind: SchedulerKind,
) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::Schedule("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(TrainError::Schedule(format!("step {step} beyond total {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(TrainError::Schedule(format!("warmup ratio {warmup_ratio} not in [0, 1)")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(match kind {
        SchedulerKind::Linear => 1.0 - progress,
        SchedulerKind::Cosine => 0.5 * (1.0 + (PI * progress).cos()),
    })
}
