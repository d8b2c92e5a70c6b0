//! Run configuration: a sectioned TOML file where every key has a default
//! and unknown keys are rejected with their full path.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ofdiff_core::ddpo::{DdpoConfig, PolicyConfig, RewardConfig};
use ofdiff_core::denoiser::DenoiserConfig;
use ofdiff_core::diffusion::{LossOptions, Sampler};
use ofdiff_core::metrics::EvalConfig;
use ofdiff_core::numerics::AdamWConfig;
use ofdiff_core::scene::SceneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_count: usize,
    pub val_count: usize,
    /// Split seeds are derived from the global seed when unset.
    pub train_seed: Option<u64>,
    pub val_seed: Option<u64>,
    pub spec: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_count: 500,
            val_count: 100,
            train_seed: None,
            val_seed: None,
            spec: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch: usize,
    /// Planned optimizer iterations.
    pub iterations: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Diffusion steps of the noise schedule.
    pub timesteps: usize,
    /// Condition on instance shapes; off trains on filled layout boxes.
    pub esgm: bool,
    /// Include the consistency term.
    pub dcloss: bool,
    pub literal_consistency: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 16,
            iterations: 1000,
            lr: 1e-3,
            weight_decay: 0.0,
            timesteps: 200,
            esgm: true,
            dcloss: true,
            literal_consistency: false,
            checkpoint_every: 100,
        }
    }
}

impl TrainSection {
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            consistency: self.dcloss,
            literal_consistency: self.literal_consistency,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub sampler: Sampler,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: 50,
            sampler: Sampler::Ancestral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpoSection {
    pub enabled: bool,
    pub k: usize,
    pub omega: f64,
    pub clip_eps: f64,
    pub normalize_rewards: bool,
    pub updates: usize,
    pub batch: usize,
    pub steps: usize,
    pub inner_steps: usize,
    pub lr: f64,
    /// Target mean brightness of the toy reward.
    pub toy_target: f64,
}

impl Default for DdpoSection {
    fn default() -> Self {
        let d = DdpoConfig::default();
        let r = RewardConfig::default();
        DdpoSection {
            enabled: false,
            k: r.k,
            omega: r.omega,
            clip_eps: d.policy.clip_eps,
            normalize_rewards: d.policy.normalize_rewards,
            updates: d.updates,
            batch: d.batch,
            steps: d.steps,
            inner_steps: d.inner_steps,
            lr: d.optimizer.lr,
            toy_target: 0.8,
        }
    }
}

impl DdpoSection {
    pub fn ddpo_config(&self) -> DdpoConfig {
        DdpoConfig {
            steps: self.steps,
            batch: self.batch,
            updates: self.updates,
            inner_steps: self.inner_steps,
            policy: PolicyConfig {
                clip_eps: self.clip_eps,
                normalize_rewards: self.normalize_rewards,
            },
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            k: self.k,
            omega: self.omega,
            ..RewardConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub padding_frac: f64,
    pub out_size: usize,
    pub low_thresh: f64,
    pub high_thresh: f64,
    pub mmd_permutations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = EvalConfig::default();
        EvalSection {
            padding_frac: m.padding_frac,
            out_size: m.out_size,
            low_thresh: m.low_thresh,
            high_thresh: m.high_thresh,
            mmd_permutations: 200,
        }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            padding_frac: self.padding_frac,
            out_size: self.out_size,
            low_thresh: self.low_thresh,
            high_thresh: self.high_thresh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: DenoiserConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub ddpo: DdpoSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            model: DenoiserConfig {
                base_width: 8,
                ..DenoiserConfig::default()
            },
            train: TrainSection::default(),
            sample: SampleSection::default(),
            ddpo: DdpoSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config key `{path}`: {}", e.into_inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.dataset.spec;
        spec.validate().context("config key `dataset.spec`")?;
        self.model.validate().context("config key `model`")?;
        if let Some(bad) = spec.categories.iter().find(|c| c.id as usize >= self.model.num_categories) {
            bail!(
                "config key `dataset.spec.categories`: id {} needs model.num_categories > {}",
                bad.id,
                bad.id
            );
        }
        if spec.canvas_size % self.model.size_divisor() != 0 {
            bail!(
                "config key `model.levels`: canvas {} is not divisible by {}",
                spec.canvas_size,
                self.model.size_divisor()
            );
        }
        if self.train.batch == 0 {
            bail!("config key `train.batch`: must be positive");
        }
        if self.train.timesteps < 2 {
            bail!("config key `train.timesteps`: must be at least 2");
        }
        if self.sample.steps == 0 || self.sample.steps > self.train.timesteps {
            bail!("config key `sample.steps`: must be in 1..={}", self.train.timesteps);
        }
        if self.ddpo.steps == 0 || self.ddpo.steps > self.train.timesteps {
            bail!("config key `ddpo.steps`: must be in 1..={}", self.train.timesteps);
        }
        if !(self.ddpo.clip_eps > 0.0) {
            bail!("config key `ddpo.clip_eps`: must be positive");
        }
        if self.ddpo.inner_steps == 0 {
            bail!("config key `ddpo.inner_steps`: must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
