use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, NoiseSchedule};
use super::to_model_range;
use crate::denoiser::{Branches, ConditionBundle, Denoiser};
use crate::error::{Error, Result};
use crate::esgm::identity_condition;
use crate::mask::Mask;
use crate::numerics::{adamw_step, Graph, OptimizerState, Tensor, Var};
use crate::rng::{normal_vec, stream, Rng};
use crate::scene::{box_mask, SceneSample};

const TRAIN_STREAM: u64 = 0x5452_4149;

/// The training-phase shape condition: the true instance composite, or the
/// union of filled boxes when the shape module is ablated.
pub fn training_condition(sample: &SceneSample, use_shape_masks: bool) -> Result<Mask> {
    if use_shape_masks {
        return identity_condition(sample);
    }
    let size = sample.composite_mask.width();
    let mut m = Mask::new(size, size);
    for b in &sample.layout.boxes {
        m.or_assign(&box_mask(b, size));
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `(B, C, H, W)` in `[0, 1]`.
    pub images: Tensor,
    /// `(B, 1, H, W)` binary.
    pub masks: Tensor,
    pub categories: Vec<Vec<u32>>,
}

impl TrainBatch {
    pub fn new(images: Tensor, masks: Tensor, categories: Vec<Vec<u32>>) -> Result<Self> {
        let (si, sm) = (images.shape(), masks.shape());
        if si.len() != 4 || sm.len() != 4 || si[0] != sm[0] || sm[1] != 1 || si[2..] != sm[2..] || si[0] != categories.len() {
            return Err(Error::shape(
                "TrainBatch",
                format!("images {si:?}, masks {sm:?}, {} category lists", categories.len()),
            ));
        }
        if si[0] == 0 {
            return Err(Error::contract("training batch is empty"));
        }
        Ok(TrainBatch {
            images,
            masks,
            categories,
        })
    }

    pub fn from_samples(samples: &[&SceneSample], use_shape_masks: bool) -> Result<Self> {
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let masks = samples
            .iter()
            .map(|s| training_condition(s, use_shape_masks).map(|m| m.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let categories = samples.iter().map(|s| s.layout.category_ids.clone()).collect();
        Self::new(images, Tensor::stack(&masks)?, categories)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Adds the consistency term.
    pub consistency: bool,
    /// Uses `mse(eps_m, sg(eps_m))` as printed instead of `mse(eps_s, sg(eps_m))`.
    pub literal_consistency: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            consistency: true,
            literal_consistency: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_s: Var,
    pub l_m: Var,
    pub l_c: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_s: g.value(self.l_s).item(),
            l_m: g.value(self.l_m).item(),
            l_c: self.l_c.map_or(0.0, |v| g.value(v).item()),
            total: g.value(self.total).item(),
        }
    }
}

/// `l_s = mse(eps_s, eps)`, `l_m = mse(eps_m, eps)`,
/// `l_c = mse(eps_s, sg(eps_m))`, `total = l_s + l_m + l_c`.
pub fn assemble_losses(g: &mut Graph, eps_s: Var, eps_m: Var, eps: Var, opts: LossOptions) -> Result<LossTerms> {
    let l_s = g.mse(eps_s, eps)?;
    let l_m = g.mse(eps_m, eps)?;
    let mut total = g.add(l_s, l_m)?;
    let l_c = if opts.consistency {
        let anchor = g.stop_gradient(eps_m)?;
        let pred = if opts.literal_consistency { eps_m } else { eps_s };
        let l_c = g.mse(pred, anchor)?;
        total = g.add(total, l_c)?;
        Some(l_c)
    } else {
        None
    };
    Ok(LossTerms { l_s, l_m, l_c, total })
}

pub struct LossRecord {
    pub terms: LossTerms,
    pub bundle: ConditionBundle,
    pub eps_s: Var,
    pub eps_m: Var,
    pub timesteps: Vec<usize>,
}

pub struct LossGraph {
    pub graph: Graph,
    pub record: LossRecord,
}

/// Noises the batch (uniform `t`, fresh standard-normal noise per example,
/// drawn from `rng`) and records the dual-branch objective into `g`.
#[allow(clippy::too_many_arguments)]
pub fn record_losses(
    g: &mut Graph,
    model: &Denoiser,
    batch: &TrainBatch,
    n: u64,
    total: u64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    opts: LossOptions,
) -> Result<LossRecord> {
    let b = batch.len();
    let per = batch.images.len() / b;
    let z0 = to_model_range(&batch.images);
    let mut timesteps = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b * per);
    let mut noisy = Vec::with_capacity(b * per);
    for i in 0..b {
        let t = rng.random_range(1..=schedule.steps());
        let eps = Tensor::new(vec![per], normal_vec(rng, per))?;
        let zi = Tensor::new(vec![per], z0.data()[i * per..(i + 1) * per].to_vec())?;
        noisy.extend_from_slice(q_sample(&zi, t, &eps, schedule)?.data());
        noise.extend_from_slice(eps.data());
        timesteps.push(t);
    }
    let shape = batch.images.shape().to_vec();
    let z_t = g.constant(Tensor::new(shape.clone(), noisy)?);
    let eps = g.constant(Tensor::new(shape, noise)?);
    let image = g.constant(z0);
    let mask = g.constant(batch.masks.clone());
    let mut bundle = model.encode_conditions(g, Some(image), mask, &batch.categories)?;
    model.attach_mix(g, &mut bundle, n, total)?;
    let pred = model.predict_noise(g, z_t, &timesteps, &bundle, Branches::Both)?;
    let (eps_s, eps_m) = match (pred.eps_s, pred.eps_m) {
        (Some(s), Some(m)) => (s, m),
        _ => return Err(Error::Internal("dual-branch prediction missing a branch".into())),
    };
    let terms = assemble_losses(g, eps_s, eps_m, eps, opts)?;
    Ok(LossRecord {
        terms,
        bundle,
        eps_s,
        eps_m,
        timesteps,
    })
}

/// [`record_losses`] into a fresh graph.
pub fn build_losses(
    model: &Denoiser,
    batch: &TrainBatch,
    n: u64,
    total: u64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    opts: LossOptions,
) -> Result<LossGraph> {
    let mut graph = Graph::new();
    let record = record_losses(&mut graph, model, batch, n, total, schedule, rng, opts)?;
    Ok(LossGraph { graph, record })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer iterations.
    pub n: u64,
    /// Planned iterations (the `N` of the mixing weight).
    pub total: u64,
    pub epoch: u64,
    pub seed: u64,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(model: &Denoiser, total: u64, seed: u64, optimizer: crate::numerics::AdamWConfig) -> Self {
        TrainState {
            n: 0,
            total,
            epoch: 0,
            seed,
            optimizer: OptimizerState::new(optimizer, model.params()),
        }
    }

    /// The per-step stream, keyed by (seed, epoch, step).
    pub fn step_rng(&self) -> Rng {
        stream(self.seed, &[TRAIN_STREAM, self.epoch, self.n])
    }
}

pub struct StepReport {
    pub losses: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// One optimizer iteration on `batch`; increments `state.n`.
pub fn training_step(
    model: &mut Denoiser,
    state: &mut TrainState,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    opts: LossOptions,
) -> Result<StepReport> {
    if state.n >= state.total {
        return Err(Error::ScheduleExhausted {
            n: state.n,
            total: state.total,
        });
    }
    let mut rng = state.step_rng();
    let lg = build_losses(model, batch, state.n, state.total, schedule, &mut rng, opts)?;
    let grads = lg.graph.backward(lg.record.terms.total)?.for_params(model.params());
    let losses = lg.record.terms.breakdown(&lg.graph);
    adamw_step(model.params_mut(), &grads, &mut state.optimizer)?;
    state.n += 1;
    Ok(StepReport { losses, grads })
}

