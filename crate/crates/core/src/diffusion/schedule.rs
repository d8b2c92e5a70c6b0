use serde::{Deserialize, Serialize};

use super::check_same_shape;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const REFERENCE_STEPS: f64 = 1000.0;
const BETA_CAP: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step variances indexed `1..=T`; index 0 holds the empty-product
/// convention (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear betas from 1e-4 to 0.02 at T = 1000, with both endpoints scaled by
/// `1000 / T` for other lengths (and capped below 1).
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::contract(format!("schedule needs T >= 2, got {steps}")));
    }
    let ScheduleKind::Linear = kind;
    let scale = REFERENCE_STEPS / steps as f64;
    let (lo, hi) = ((BETA_START * scale).min(BETA_CAP), (BETA_END * scale).min(BETA_CAP));
    let mut betas = vec![0.0; steps + 1];
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        betas[t] = lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64;
        alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::contract(format!("timestep {t} outside [0, {}]", self.steps)));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    check_same_shape("q_sample", z0, eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
