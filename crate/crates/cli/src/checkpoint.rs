//! Checkpoint archive: a text header naming every array (dtype, shape and
//! byte range), then the arrays as little-endian f64.

use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ofdiff_core::denoiser::Denoiser;
use ofdiff_core::diffusion::TrainState;
use ofdiff_core::numerics::{AdamWConfig, OptimizerState, Tensor};
use ofdiff_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const MAGIC: &str = "ofdiff-checkpoint";
const VERSION: u32 = 1;
const MODEL_KEY: u64 = 0x4d4f_4445;
const TRAIN_KEY: u64 = 0x5452_4e53;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    n: u64,
    total: u64,
    epoch: u64,
    seed: u64,
    adam_step: u64,
    adam: AdamWConfig,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Denoiser,
    pub train: TrainState,
    /// Policy-gradient updates applied on top of training.
    pub ddpo_updates: u64,
}

impl Checkpoint {
    /// Freshly initialized model and optimizer for `config`.
    pub fn init(config: &RunConfig) -> Result<Self> {
        let model = Denoiser::new(config.model.clone(), derive_seed(config.seed, &[MODEL_KEY]))?;
        let train = TrainState::new(
            &model,
            config.train.iterations,
            derive_seed(config.seed, &[TRAIN_KEY]),
            config.train.adamw(),
        );
        Ok(Checkpoint {
            config: config.clone(),
            model,
            train,
            ddpo_updates: 0,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.names();
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for (name, p) in names.iter().zip(self.model.params()) {
            arrays.push((format!("param/{name}"), p));
        }
        for (name, m) in names.iter().zip(&self.train.optimizer.m) {
            arrays.push((format!("adam_m/{name}"), m));
        }
        for (name, v) in names.iter().zip(&self.train.optimizer.v) {
            arrays.push((format!("adam_v/{name}"), v));
        }
        let train = TrainHeader {
            n: self.train.n,
            total: self.train.total,
            epoch: self.train.epoch,
            seed: self.train.seed,
            adam_step: self.train.optimizer.step,
            adam: self.train.optimizer.config,
        };
        let mut head = String::new();
        head.push_str(&format!("{MAGIC} {VERSION}\n"));
        head.push_str(&format!("config_hash {}\n", self.config.hash()));
        head.push_str(&format!("config {}\n", serde_json::to_string(&self.config)?));
        head.push_str(&format!("train {}\n", serde_json::to_string(&train)?));
        head.push_str(&format!("ddpo_updates {}\n", self.ddpo_updates));
        head.push_str(&format!("arrays {}\n", arrays.len()));
        let mut offset = 0usize;
        for (name, t) in &arrays {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let len = t.len() * 8;
            head.push_str(&format!("{name} f64 {} {offset} {len}\n", shape.join("x")));
            offset += len;
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| anyhow!("truncated checkpoint header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).context("checkpoint header is not UTF-8")
        };
        let field = |l: &str, key: &str| -> Result<String> {
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| anyhow!("expected `{key}` line, got `{}`", l.chars().take(40).collect::<String>()))
        };
        let magic = line()?.to_string();
        ensure!(magic == format!("{MAGIC} {VERSION}"), "not a version-{VERSION} checkpoint: `{magic}`");
        let hash = field(line()?, "config_hash")?;
        let config: RunConfig = serde_json::from_str(&field(line()?, "config")?)?;
        ensure!(config.hash() == hash, "checkpoint config does not match its recorded hash");
        let train: TrainHeader = serde_json::from_str(&field(line()?, "train")?)?;
        let ddpo_updates: u64 = field(line()?, "ddpo_updates")?.parse()?;
        let count: usize = field(line()?, "arrays")?.parse()?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let l = line()?.to_string();
            let parts: Vec<&str> = l.split(' ').collect();
            ensure!(parts.len() == 5, "malformed array entry `{l}`");
            ensure!(parts[1] == "f64", "array {}: unsupported dtype {}", parts[0], parts[1]);
            let shape: Vec<usize> = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2].split('x').map(str::parse).collect::<Result<_, _>>()?
            };
            entries.push((parts[0].to_string(), shape, parts[3].parse::<usize>()?, parts[4].parse::<usize>()?));
        }
        ensure!(line()? == "data", "missing data marker");
        let data = &bytes[pos..];
        let mut expect = 0usize;
        let mut arrays = std::collections::HashMap::new();
        for (name, shape, offset, len) in entries {
            ensure!(offset == expect, "array {name} at offset {offset}, expected {expect}");
            ensure!(len == shape.iter().product::<usize>() * 8, "array {name}: length does not match shape");
            let raw = data.get(offset..offset + len).ok_or_else(|| anyhow!("array {name} runs past the end"))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, Tensor::new(shape, values)?);
            expect += len;
        }
        ensure!(expect == data.len(), "{} trailing bytes after the last array", data.len() - expect);

        let mut ck = Checkpoint::init(&config)?;
        let names = ck.model.names().to_vec();
        let mut take = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| {
                    arrays
                        .remove(&format!("{prefix}/{n}"))
                        .ok_or_else(|| anyhow!("checkpoint has no array {prefix}/{n}"))
                })
                .collect()
        };
        let params = take("param")?;
        let m = take("adam_m")?;
        let v = take("adam_v")?;
        if let Some(extra) = arrays.keys().next() {
            bail!("checkpoint has unexpected array {extra}");
        }
        ck.model.set_params(params)?;
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            let want = ck.model.params()[i].shape();
            ensure!(a.shape() == want && b.shape() == want, "optimizer state shape mismatch for {}", names[i]);
        }
        ck.train = TrainState {
            n: train.n,
            total: train.total,
            epoch: train.epoch,
            seed: train.seed,
            optimizer: OptimizerState {
                config: train.adam,
                step: train.adam_step,
                m,
                v,
            },
        };
        ck.ddpo_updates = ddpo_updates;
        Ok(ck)
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}
