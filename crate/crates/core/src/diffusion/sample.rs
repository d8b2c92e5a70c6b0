use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::to_pixel_range;
use crate::denoiser::{ConditionBundle, ShapeBranchView};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::{Graph, Tensor};
use crate::parallel;
use crate::rng::{derive_seed, normal_vec, stream};

const SAMPLE_STREAM: u64 = 0x534d_504c;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// DDPM posterior transitions.
    #[default]
    Ancestral,
    /// DDIM with eta = 0.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub mask: Mask,
    pub categories: Vec<u32>,
}

/// One reverse transition `x_t -> x_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub s: usize,
    /// `x_t`, shape `(1, C, H, W)`.
    pub state: Tensor,
    /// `x_s`.
    pub action: Tensor,
    /// Transition mean.
    pub mean: Tensor,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `(C, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// Final state in model range, before clamping.
    pub latent: Tensor,
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

/// `[0, t_1, ..., T]`: `steps` strided reverse transitions over a `T`-step
/// schedule.
pub fn timestep_grid(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::contract(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..=steps).map(|i| i * total / steps).collect())
}

/// Coefficients `(a, b)` of the DDPM posterior mean `a * x_t + b * eps` for
/// the transition `t -> s`, with `eps` the predicted noise.
pub fn posterior_coefficients(t: usize, s: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let alpha = ab_t / ab_s;
    let beta = 1.0 - alpha;
    let c_x0 = ab_s.sqrt() * beta / (1.0 - ab_t);
    let c_xt = alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    (c_x0 / ab_t.sqrt() + c_xt, -c_x0 * (1.0 - ab_t).sqrt() / ab_t.sqrt())
}

/// Posterior mean of `x_s` given `x_t` and a noise prediction.
pub fn posterior_mean(x_t: &Tensor, eps: &Tensor, t: usize, s: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    super::check_same_shape("posterior_mean", x_t, eps)?;
    let (a, b) = posterior_coefficients(t, s, schedule);
    let data = x_t.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Posterior variance of `t -> s`, floored at `beta_1` so the final
/// transition keeps a proper density.
pub fn step_variance(t: usize, s: usize, schedule: &NoiseSchedule) -> f64 {
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let beta = 1.0 - ab_t / ab_s;
    ((1.0 - ab_s) / (1.0 - ab_t) * beta).max(schedule.beta(1))
}

/// DDIM (eta = 0) update `t -> s`.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, t: usize, s: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    super::check_same_shape("ddim_step", x_t, eps)?;
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| {
            let x0 = (x - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt();
            ab_s.sqrt() * x0 + (1.0 - ab_s).sqrt() * e
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Condition features evaluated once and replayed as constants at every step.
pub(crate) struct FrozenCondition {
    c_l: Vec<Tensor>,
    c_t: Tensor,
}

impl FrozenCondition {
    pub(crate) fn new(view: &ShapeBranchView<'_>, req: &SampleRequest) -> Result<Self> {
        let mut g = Graph::new();
        let m = g.constant(req.mask.to_tensor().reshape(&[1, 1, req.mask.height(), req.mask.width()])?);
        let b = view.encode(&mut g, m, std::slice::from_ref(&req.categories))?;
        Ok(FrozenCondition {
            c_l: b.c_l.iter().map(|&v| g.value(v).clone()).collect(),
            c_t: g.value(b.c_t).clone(),
        })
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> ConditionBundle {
        ConditionBundle {
            c_i: None,
            c_l: self.c_l.iter().map(|t| g.constant(t.clone())).collect(),
            c_m: None,
            c_t: g.constant(self.c_t.clone()),
            c_f: None,
        }
    }

    pub(crate) fn predict(&self, view: &ShapeBranchView<'_>, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let bundle = self.bind(&mut g);
        let z = g.constant(x_t.clone());
        let eps = view.predict(&mut g, z, &[t], &bundle)?;
        Ok(g.value(eps).clone())
    }
}

/// Generates one image from a shape condition using only the shape branch.
pub fn sample(
    view: &ShapeBranchView<'_>,
    req: &SampleRequest,
    schedule: &NoiseSchedule,
    steps: usize,
    sampler: Sampler,
    seed: u64,
    record: bool,
) -> Result<SampleOutput> {
    let grid = timestep_grid(schedule.steps(), steps)?;
    let channels = view.model().config().image_channels;
    let shape = vec![1, channels, req.mask.height(), req.mask.width()];
    let per = channels * req.mask.height() * req.mask.width();
    let cond = FrozenCondition::new(view, req)?;
    let mut rng = stream(seed, &[SAMPLE_STREAM]);
    let mut x = Tensor::new(shape.clone(), normal_vec(&mut rng, per))?;
    let mut trajectory = record.then(Vec::new);
    for w in grid.windows(2).rev() {
        let (s, t) = (w[0], w[1]);
        let eps = cond.predict(view, &x, t)?;
        let (next, mean, sigma) = match sampler {
            Sampler::Ancestral => {
                let mean = posterior_mean(&x, &eps, t, s, schedule)?;
                let sigma = step_variance(t, s, schedule).sqrt();
                let z = normal_vec(&mut rng, per);
                let data = mean.data().iter().zip(&z).map(|(m, z)| m + sigma * z).collect();
                (Tensor::new(shape.clone(), data)?, mean, sigma)
            }
            Sampler::Deterministic => {
                let next = ddim_step(&x, &eps, t, s, schedule)?;
                (next.clone(), next, 0.0)
            }
        };
        if let Some(tr) = trajectory.as_mut() {
            tr.push(TrajectoryStep {
                t,
                s,
                state: x.clone(),
                action: next.clone(),
                mean,
                sigma,
            });
        }
        x = next;
    }
    let latent = x.reshape(&shape[1..])?;
    Ok(SampleOutput {
        image: to_pixel_range(&latent),
        latent,
        trajectory,
    })
}

/// [`sample`] over many requests; request `i` uses seed `derive_seed(seed, [i])`.
pub fn sample_many(
    view: &ShapeBranchView<'_>,
    reqs: &[SampleRequest],
    schedule: &NoiseSchedule,
    steps: usize,
    sampler: Sampler,
    seed: u64,
    record: bool,
) -> Result<Vec<SampleOutput>> {
    parallel::try_map_range(reqs.len(), |i| {
        sample(view, &reqs[i], schedule, steps, sampler, derive_seed(seed, &[i as u64]), record)
    })
}
