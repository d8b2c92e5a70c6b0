//! Forward noising, the dual-branch training objective and shape-only
//! sampling. Diffusion runs in pixel space on images mapped to `[-1, 1]`.

mod sample;
mod schedule;
mod train;

pub use sample::{
    ddim_step, posterior_coefficients, posterior_mean, sample, sample_many, step_variance, timestep_grid, SampleOutput,
    SampleRequest, Sampler, TrajectoryStep,
};
pub(crate) use sample::FrozenCondition;
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleKind};
pub use train::{
    assemble_losses, build_losses, record_losses, training_condition, training_step, LossBreakdown, LossGraph, LossOptions,
    LossRecord, LossTerms, StepReport, TrainBatch, TrainState,
};

use crate::error::Result;
use crate::numerics::Tensor;

/// `[0, 1]` pixels to the diffusion range `[-1, 1]`.
pub fn to_model_range(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Diffusion range back to clamped `[0, 1]` pixels.
pub fn to_pixel_range(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
