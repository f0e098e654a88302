use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use un2clip_autograd::Tensor;

use crate::error::{CoreError, Result};

/// Largest admissible `alpha_bar[T]` for a training schedule.
pub const TERMINAL_ALPHA_BAR: f64 = 0.05;

/// Linear-beta schedule; index `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.06,
        }
    }
}

impl ScheduleConfig {
    /// Builds the schedule and requires a near-pure-noise terminal state.
    pub fn build(&self) -> Result<DiffusionSchedule> {
        let s = make_schedule(self.steps, self.beta_min, self.beta_max)?;
        if s.terminal_alpha_bar() >= TERMINAL_ALPHA_BAR {
            return Err(CoreError::Schedule(format!(
                "alpha_bar[T] = {:.4} is not below {TERMINAL_ALPHA_BAR}; raise beta_max or steps",
                s.terminal_alpha_bar()
            )));
        }
        Ok(s)
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(CoreError::Schedule("at least one step required".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bar.last().expect("non-empty")
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `alpha_bar` at step `t` (1-based).
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Digest over the beta sequence.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(
    x0: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<f32>> {
    if x0.shape() != eps.shape() {
        return Err(CoreError::Image(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar_at(t)?;
    Ok(mix(x0, eps, ab))
}

pub(crate) fn mix(x0: &Tensor<f32>, eps: &Tensor<f32>, alpha_bar: f64) -> Tensor<f32> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| (a * *x as f64 + b * *e as f64) as f32)
        .collect();
    Tensor::from_vec(x0.shape(), data).expect("same shape")
}

/// Clean image implied by a noise estimate: `(x_t − √(1−ᾱ)·ε̂) / √ᾱ`.
pub fn predict_x0(x_t: f64, eps_hat: f64, alpha_bar: f64) -> f64 {
    (x_t - (1.0 - alpha_bar).sqrt() * eps_hat) / alpha_bar.sqrt()
}
