//! Policy-gradient fine-tuning of the shape branch.
//!
//! Reverse diffusion is treated as an MDP: the state is `(c, t, x_t)`, the
//! action is the next latent, and the policy is the Gaussian reverse
//! transition of the ancestral sampler. Only the terminal transition carries
//! a reward. Updates use the importance-weighted score-function estimator
//! with PPO-style ratio clipping and per-batch reward normalization.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ParamGroup, ShapeBranchView};
use crate::diffusion::{
    posterior_coefficients, posterior_mean, sample_many, step_variance, FrozenCondition, NoiseSchedule, SampleRequest,
    Sampler, TrajectoryStep,
};
use crate::error::{Error, Result};
use crate::metrics::image_features;
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamId, Tensor};
use crate::parallel;
use crate::rng::derive_seed;

const ROLLOUT_STREAM: u64 = 0x524f_4c4c;
/// Trajectories whose gradients are held in memory at once.
const GRADIENT_CHUNK: usize = 16;

/// Log-density of `x` under `N(mean, sigma^2 I)`.
pub fn gaussian_logprob(x: &Tensor, mean: &Tensor, sigma: f64) -> Result<f64> {
    if x.shape() != mean.shape() {
        return Err(Error::shape("gaussian_logprob", format!("{:?} vs {:?}", x.shape(), mean.shape())));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("policy density undefined at sigma={sigma}")));
    }
    let var = sigma * sigma;
    let sq: f64 = x.data().iter().zip(mean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * sq / var - 0.5 * x.len() as f64 * (2.0 * PI * var).ln())
}

/// One recorded denoising episode under a frozen behavior policy.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub condition: SampleRequest,
    pub steps: Vec<TrajectoryStep>,
    /// Log-density of each action under the behavior policy.
    pub logprobs_old: Vec<f64>,
    /// Terminal reward, set after evaluating the final image.
    pub reward: Option<f64>,
    /// Final image in `[0, 1]`, shape `(C, H, W)`.
    pub image: Tensor,
    /// Final latent in model range.
    pub latent: Tensor,
}

impl Trajectory {
    /// `x_T, ..., x_0`; one longer than `steps`.
    pub fn states(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.steps.iter().map(|s| &s.state).collect();
        if let Some(last) = self.steps.last() {
            v.push(&last.action);
        }
        v
    }

    /// Per-transition rewards: zero everywhere except the terminal one.
    pub fn step_rewards(&self) -> Result<Vec<f64>> {
        let r = self
            .reward
            .ok_or_else(|| Error::contract("trajectory reward is not set"))?;
        let mut out = vec![0.0; self.steps.len()];
        if let Some(last) = out.last_mut() {
            *last = r;
        }
        Ok(out)
    }
}

/// Samples one trajectory per condition with the ancestral sampler and
/// records behavior-policy log-densities.
pub fn rollout(
    view: &ShapeBranchView<'_>,
    conditions: &[SampleRequest],
    schedule: &NoiseSchedule,
    steps: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if sampler == Sampler::Deterministic {
        return Err(Error::contract("policy density undefined at sigma=0; rollouts need the ancestral sampler"));
    }
    let outs = sample_many(view, conditions, schedule, steps, sampler, derive_seed(seed, &[ROLLOUT_STREAM]), true)?;
    outs.into_iter()
        .zip(conditions)
        .map(|(out, cond)| {
            let steps = out
                .trajectory
                .ok_or_else(|| Error::Internal("sampler returned no trajectory".into()))?;
            let logprobs_old = steps
                .iter()
                .map(|s| gaussian_logprob(&s.action, &s.mean, s.sigma))
                .collect::<Result<Vec<_>>>()?;
            Ok(Trajectory {
                condition: cond.clone(),
                steps,
                logprobs_old,
                reward: None,
                image: out.image,
                latent: out.latent,
            })
        })
        .collect()
}

/// Log-density of the transition `x_t -> x_prev` (from step `t` to `s`)
/// under the current shape-branch policy.
#[allow(clippy::too_many_arguments)]
pub fn transition_logprob(
    view: &ShapeBranchView<'_>,
    condition: &SampleRequest,
    x_t: &Tensor,
    x_prev: &Tensor,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::contract("no transition below t=1"));
    }
    if s >= t {
        return Err(Error::contract(format!("transition must go backwards, got {t} -> {s}")));
    }
    let cond = FrozenCondition::new(view, condition)?;
    let eps = cond.predict(view, x_t, t)?;
    let mean = posterior_mean(x_t, &eps, t, s, schedule)?;
    gaussian_logprob(x_prev, &mean, step_variance(t, s, schedule).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// 8x8 block-averaged luminance, 64 dims.
    Gray8x8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub k: usize,
    pub omega: f64,
    pub feature_map: FeatureMap,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            k: 3,
            omega: 1.0,
            feature_map: FeatureMap::Gray8x8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.k == 0 || self.k >= batch {
            return Err(Error::contract(format!("reward k={} needs 1 <= k < batch size {batch}", self.k)));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::contract(format!("reward omega must be >= 0, got {}", self.omega)));
        }
        Ok(())
    }
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian fit of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of dimensions whose variance was raised to the floor.
    pub floored: usize,
}

impl GaussianFit {
    /// Per-dimension mean and population variance, floored at [`VARIANCE_FLOOR`].
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::contract("cannot fit a Gaussian to zero feature vectors"));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::shape("GaussianFit::fit", "feature vectors differ in length"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = 0;
        for s in var.iter_mut() {
            *s /= n as f64;
            if *s < VARIANCE_FLOOR {
                *s = VARIANCE_FLOOR;
                floored += 1;
            }
        }
        Ok(GaussianFit { mean, var, floored })
    }

    /// `KL(self || other)` for diagonal Gaussians.
    pub fn kl_to(&self, other: &GaussianFit) -> Result<f64> {
        if self.mean.len() != other.mean.len() {
            return Err(Error::shape("kl_to", format!("{} vs {} dims", self.mean.len(), other.mean.len())));
        }
        Ok((0..self.mean.len())
            .map(|i| {
                let (m1, v1, m2, v2) = (self.mean[i], self.var[i], other.mean[i], other.var[i]);
                ((m1 - m2).powi(2) + v1) / (2.0 * v2) - 0.5 + 0.5 * (v2 / v1).ln()
            })
            .sum())
    }
}

/// Feature statistics of held-out real images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealReference {
    pub fit: GaussianFit,
}

impl RealReference {
    pub fn from_images(images: &[Tensor], feature_map: FeatureMap) -> Result<Self> {
        let feats = features_of(images, feature_map)?;
        Ok(RealReference {
            fit: GaussianFit::fit(&feats)?,
        })
    }
}

pub fn features_of(images: &[Tensor], feature_map: FeatureMap) -> Result<Vec<Vec<f64>>> {
    match feature_map {
        FeatureMap::Gray8x8 => parallel::try_map_range(images.len(), |i| image_features(&images[i])),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardReport {
    pub rewards: Vec<f64>,
    /// Distance to the k-th nearest other batch member.
    pub knn: Vec<f64>,
    /// Shared batch-to-reference KL.
    pub kl: f64,
    /// Batch feature dimensions whose variance hit the floor.
    pub floored_dims: usize,
}

/// Diversity minus weighted distribution mismatch, per image.
pub fn compute_reward(images: &[Tensor], reference: &RealReference, cfg: &RewardConfig) -> Result<RewardReport> {
    cfg.validate(images.len())?;
    let feats = features_of(images, cfg.feature_map)?;
    let fit = GaussianFit::fit(&feats)?;
    if fit.floored > 0 {
        log::warn!("reward batch has {} degenerate feature dimensions; variance floored", fit.floored);
    }
    let kl = fit.kl_to(&reference.fit)?;
    let knn = parallel::map_range(feats.len(), |i| {
        let mut d: Vec<f64> = feats
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, f)| f.iter().zip(&feats[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        d[cfg.k - 1]
    });
    Ok(RewardReport {
        rewards: knn.iter().map(|d| d - cfg.omega * kl).collect(),
        knn,
        kl,
        floored_dims: fit.floored,
    })
}

/// `-(mean(x) - target)^2` over all pixels of a `[0, 1]` image.
pub fn brightness_reward(image: &Tensor, target: f64) -> f64 {
    -(image.mean() - target).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub clip_eps: f64,
    pub normalize_rewards: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            clip_eps: 0.2,
            normalize_rewards: true,
        }
    }
}

/// Gradient of the clipped surrogate objective (to be maximized).
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    /// One tensor per trainable parameter, aligned with `ids`.
    pub grads: Vec<Tensor>,
    pub ids: Vec<ParamId>,
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
}

/// Parameters the policy gradient updates: everything reachable from the
/// sampling-phase view.
pub fn policy_param_ids(model: &Denoiser) -> Vec<ParamId> {
    [
        ParamGroup::SharedEncoder,
        ParamGroup::ShapeDecoder,
        ParamGroup::MaskEncoder,
        ParamGroup::Embeddings,
    ]
    .iter()
    .flat_map(|&g| model.ids_in(g))
    .collect()
}

/// Zero-mean, unit-variance rewards; all zeros when the rewards are equal.
pub fn advantages(rewards: &[f64], normalize: bool) -> Vec<f64> {
    if !normalize {
        return rewards.to_vec();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let sd = var.sqrt();
    rewards.iter().map(|r| (r - mean) / sd).collect()
}

struct TrajectoryGrad {
    grads: Vec<Option<Tensor>>,
    ratio_sum: f64,
    clipped: usize,
}

fn trajectory_gradient(
    view: &ShapeBranchView<'_>,
    tr: &Trajectory,
    advantage: f64,
    weight: f64,
    schedule: &NoiseSchedule,
    cfg: &PolicyConfig,
    ids: &[ParamId],
) -> Result<TrajectoryGrad> {
    let req = &tr.condition;
    let mut g = Graph::new();
    let m = g.constant(req.mask.to_tensor().reshape(&[1, 1, req.mask.height(), req.mask.width()])?);
    let bundle = view.encode(&mut g, m, std::slice::from_ref(&req.categories))?;
    let mut terms = Vec::with_capacity(tr.steps.len());
    let (mut ratio_sum, mut clipped) = (0.0, 0);
    for (step, &old) in tr.steps.iter().zip(&tr.logprobs_old) {
        let z = g.constant(step.state.clone());
        let eps = view.predict(&mut g, z, &[step.t], &bundle)?;
        let mean = posterior_mean(&step.state, g.value(eps), step.t, step.s, schedule)?;
        let logp = gaussian_logprob(&step.action, &mean, step.sigma)?;
        let ratio = (logp - old).exp();
        ratio_sum += ratio;
        let clipped_here = (advantage > 0.0 && ratio > 1.0 + cfg.clip_eps) || (advantage < 0.0 && ratio < 1.0 - cfg.clip_eps);
        if clipped_here {
            clipped += 1;
            continue;
        }
        let coef = weight * advantage * ratio;
        if coef == 0.0 {
            continue;
        }
        // d logp = -(1 / 2 sigma^2) d |x_prev - a x_t - b eps|^2
        let (a, b) = posterior_coefficients(step.t, step.s, schedule);
        let target = Tensor::from_fn(step.action.shape(), |i| step.action.data()[i] - a * step.state.data()[i]);
        let target = g.constant(target);
        let be = g.scale(eps, b);
        let diff = g.sub(target, be)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        terms.push(g.scale(total, -0.5 * coef / (step.sigma * step.sigma)));
    }
    let grads = match terms.split_first() {
        None => vec![None; ids.len()],
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            let gr = g.backward(acc)?;
            ids.iter().map(|&id| gr.param(id).cloned()).collect()
        }
    };
    Ok(TrajectoryGrad {
        grads,
        ratio_sum,
        clipped,
    })
}

/// Importance-weighted, clipped policy-gradient estimate averaged over
/// trajectories and summed over their transitions.
pub fn estimate_policy_gradient(
    view: &ShapeBranchView<'_>,
    trajectories: &[Trajectory],
    schedule: &NoiseSchedule,
    cfg: &PolicyConfig,
) -> Result<GradientEstimate> {
    if trajectories.is_empty() {
        return Err(Error::contract("policy gradient needs at least one trajectory"));
    }
    if !(cfg.clip_eps > 0.0) {
        return Err(Error::contract(format!("clip_eps must be positive, got {}", cfg.clip_eps)));
    }
    let rewards = trajectories
        .iter()
        .map(|t| t.reward.ok_or_else(|| Error::contract("trajectory reward is not set")))
        .collect::<Result<Vec<_>>>()?;
    let adv = advantages(&rewards, cfg.normalize_rewards);
    let model = view.model();
    let ids = policy_param_ids(model);
    let mut grads: Vec<Tensor> = ids.iter().map(|id| Tensor::zeros(model.params()[id.0].shape())).collect();
    let weight = 1.0 / trajectories.len() as f64;
    let (mut ratio_sum, mut clipped, mut count) = (0.0, 0usize, 0usize);
    for (c, chunk) in trajectories.chunks(GRADIENT_CHUNK).enumerate() {
        let parts = parallel::try_map_range(chunk.len(), |i| {
            let k = c * GRADIENT_CHUNK + i;
            trajectory_gradient(view, &chunk[i], adv[k], weight, schedule, cfg, &ids)
        })?;
        for part in parts {
            ratio_sum += part.ratio_sum;
            clipped += part.clipped;
            for (acc, g) in grads.iter_mut().zip(part.grads) {
                if let Some(g) = g {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
        count += chunk.iter().map(|t| t.steps.len()).sum::<usize>();
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Internal("non-finite policy gradient".into()));
    }
    Ok(GradientEstimate {
        grads,
        ids,
        mean_ratio: ratio_sum / count.max(1) as f64,
        clipped_fraction: clipped as f64 / count.max(1) as f64,
    })
}

/// Optimizer over the policy parameters only.
#[derive(Clone, Debug)]
pub struct PolicyOptimizer {
    pub ids: Vec<ParamId>,
    pub state: OptimizerState,
}

impl PolicyOptimizer {
    pub fn new(model: &Denoiser, config: AdamWConfig) -> Self {
        let ids = policy_param_ids(model);
        let params: Vec<Tensor> = ids.iter().map(|id| model.params()[id.0].clone()).collect();
        PolicyOptimizer {
            state: OptimizerState::new(config, &params),
            ids,
        }
    }
}

/// Estimates the gradient at the current parameters and takes one ascent step.
pub fn policy_gradient_step(
    model: &mut Denoiser,
    optimizer: &mut PolicyOptimizer,
    trajectories: &[Trajectory],
    schedule: &NoiseSchedule,
    cfg: &PolicyConfig,
) -> Result<GradientEstimate> {
    let est = estimate_policy_gradient(&model.shape_view(), trajectories, schedule, cfg)?;
    if est.ids != optimizer.ids {
        return Err(Error::contract("optimizer was built for a different parameter set"));
    }
    let descent: Vec<Tensor> = est.grads.iter().map(|g| g.scale(-1.0)).collect();
    let mut params: Vec<Tensor> = optimizer.ids.iter().map(|id| model.params()[id.0].clone()).collect();
    adamw_step(&mut params, &descent, &mut optimizer.state)?;
    let all = model.params_mut();
    for (id, p) in optimizer.ids.iter().zip(params) {
        all[id.0] = p;
    }
    Ok(est)
}

/// Reward used for fine-tuning.
#[derive(Clone, Debug)]
pub enum RewardKind {
    KnnKl { reference: RealReference, config: RewardConfig },
    /// `-(mean brightness - target)^2`.
    Brightness { target: f64 },
}

impl RewardKind {
    pub fn score(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        match self {
            RewardKind::KnnKl { reference, config } => Ok(compute_reward(images, reference, config)?.rewards),
            RewardKind::Brightness { target } => Ok(images.iter().map(|i| brightness_reward(i, *target)).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpoConfig {
    /// Sampling steps per rollout.
    pub steps: usize,
    /// Trajectories per update.
    pub batch: usize,
    pub updates: usize,
    /// Gradient steps taken on each rollout batch.
    pub inner_steps: usize,
    pub policy: PolicyConfig,
    pub optimizer: AdamWConfig,
}

impl Default for DdpoConfig {
    fn default() -> Self {
        DdpoConfig {
            steps: 10,
            batch: 8,
            updates: 50,
            inner_steps: 1,
            policy: PolicyConfig::default(),
            optimizer: AdamWConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateReport {
    pub update: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
}

/// One fine-tuning round: fresh rollouts under a snapshot of the current
/// parameters, rewards on the final images, then `inner_steps` updates.
pub fn ddpo_update(
    model: &mut Denoiser,
    optimizer: &mut PolicyOptimizer,
    conditions: &[SampleRequest],
    schedule: &NoiseSchedule,
    reward: &RewardKind,
    cfg: &DdpoConfig,
    update: usize,
    seed: u64,
) -> Result<UpdateReport> {
    if cfg.inner_steps == 0 {
        return Err(Error::contract("inner_steps must be at least 1"));
    }
    let mut trs = rollout(
        &model.shape_view(),
        conditions,
        schedule,
        cfg.steps,
        Sampler::Ancestral,
        derive_seed(seed, &[update as u64]),
    )?;
    let images: Vec<Tensor> = trs.iter().map(|t| t.image.clone()).collect();
    let rewards = reward.score(&images)?;
    for (t, r) in trs.iter_mut().zip(&rewards) {
        t.reward = Some(*r);
    }
    let mut est = None;
    for _ in 0..cfg.inner_steps {
        est = Some(policy_gradient_step(model, optimizer, &trs, schedule, &cfg.policy)?);
    }
    let est = est.expect("at least one inner step");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(UpdateReport {
        update,
        mean_reward: mean,
        reward_std: sd,
        mean_ratio: est.mean_ratio,
        clipped_fraction: est.clipped_fraction,
    })
}

/// Appends one JSON object per line.
pub fn write_log_line<W: Write, T: Serialize>(w: &mut W, record: &T) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))
}
