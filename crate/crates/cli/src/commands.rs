//! The five pipeline commands. Each takes a validated [`RunConfig`], writes
//! into its output directory and appends a [`RunManifest`] there.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{info, warn};
use ofdiff_core::ddpo::{ddpo_update, write_log_line, PolicyOptimizer, RealReference, RewardKind, UpdateReport};
use ofdiff_core::diffusion::{
    make_schedule, sample, training_condition, training_step, NoiseSchedule, SampleRequest, ScheduleKind, TrainBatch,
};
use ofdiff_core::esgm::{build_mask_pool, load_mask_pool, sample_shape_condition, save_mask_pool};
use ofdiff_core::metrics::{evaluate_pairs, image_features, mmd_permutation_test, MmdTest, ShapeFidelityReport};
use ofdiff_core::parallel;
use ofdiff_core::rng::{derive_seed, stream};
use ofdiff_core::scene::{
    generate_dataset, generate_layout, image_file, read_dataset, read_image, read_layouts, write_dataset, write_image,
    write_layouts, write_mask, DatasetManifest, Layout, SceneSample, LAYOUTS_FILE,
};
use ofdiff_core::Error as CoreError;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::manifest::{file_digest, tree_digest, RunManifest, RUN_MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const DDPO_LOG_FILE: &str = "ddpo_log.jsonl";
pub const SAMPLES_FILE: &str = "samples.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

const TRAIN_SPLIT_KEY: u64 = 1;
const VAL_SPLIT_KEY: u64 = 2;
const EPOCH_KEY: u64 = 0x4550_4f43;
const DDPO_KEY: u64 = 0x4444_504f;
const RANDOM_LAYOUT_KEY: u64 = 0x524c_4159;
const SHAPE_KEY: u64 = 0x5348_4150;
const SAMPLE_KEY: u64 = 0x534d_504c;
const MMD_KEY: u64 = 0x4d4d_4400;

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?.next().is_some())
}

/// Creates `dir`, refusing a non-empty one unless `force`, in which case it
/// is cleared first.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? {
        if !force {
            bail!("output directory {} is not empty (pass --force to overwrite)", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn schedule_for(ck: &Checkpoint) -> Result<NoiseSchedule> {
    Ok(make_schedule(ck.config.train.timesteps, ScheduleKind::Linear)?)
}

pub fn split_seeds(cfg: &RunConfig) -> (u64, u64) {
    (
        cfg.dataset.train_seed.unwrap_or_else(|| derive_seed(cfg.seed, &[TRAIN_SPLIT_KEY])),
        cfg.dataset.val_seed.unwrap_or_else(|| derive_seed(cfg.seed, &[VAL_SPLIT_KEY])),
    )
}

pub struct GenDataOutput {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    /// False when some category has no training instance.
    pub pool_written: bool,
}

/// Writes `out/train`, `out/val` and the training mask pool `out/pool`.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenDataOutput> {
    let mut run = RunManifest::start("gen-data", cfg.hash(), cfg.seed);
    prepare_out_dir(out, force)?;
    let spec = &cfg.dataset.spec;
    let (train_seed, val_seed) = split_seeds(cfg);
    let train_samples = generate_dataset(spec, train_seed, cfg.dataset.train_count)?;
    let train = write_dataset(&train_samples, spec, train_seed, &out.join("train"))?;
    let val_samples = generate_dataset(spec, val_seed, cfg.dataset.val_count)?;
    let val = write_dataset(&val_samples, spec, val_seed, &out.join("val"))?;
    info!("wrote {} train and {} val scenes to {}", train.count, val.count, out.display());

    let pool_written = match build_mask_pool(&train, &train_samples) {
        Ok(pool) => {
            save_mask_pool(&pool, &out.join("pool"))?;
            true
        }
        Err(CoreError::EmptyCategory(ids)) => {
            warn!("no mask pool written: categories {ids:?} have no training instances");
            false
        }
        Err(e) => return Err(e.into()),
    };
    run.outputs.insert("train".into(), train.digest.clone());
    run.outputs.insert("val".into(), val.digest.clone());
    if pool_written {
        run.outputs.insert("pool".into(), tree_digest(&out.join("pool"), &[])?);
    }
    run.summary = serde_json::json!({ "train_count": train.count, "val_count": val.count });
    run.finish(out)?;
    Ok(GenDataOutput { train, val, pool_written })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Stop (and checkpoint) once this many iterations are complete.
    pub max_steps: Option<u64>,
}

fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream(seed, &[EPOCH_KEY, epoch]));
    order
}

/// Drops log lines past `step` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Runs the configured iterations on `data/train`. An existing checkpoint
/// in `out` is resumed, provided it was written under the same config.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, opts: TrainOptions) -> Result<Checkpoint> {
    let mut run = RunManifest::start("train", cfg.hash(), cfg.seed);
    let train_dir = data.join("train");
    let (manifest, samples) = read_dataset(&train_dir)?;
    ensure!(
        manifest.spec.canvas_size % cfg.model.size_divisor() == 0,
        "dataset canvas {} is not divisible by the model size divisor {}",
        manifest.spec.canvas_size,
        cfg.model.size_divisor()
    );
    fs::create_dir_all(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut ck = if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let (have, want) = (ck.config.hash(), cfg.hash());
        ensure!(
            have == want,
            "refusing to resume {}: checkpoint config hash {have} differs from the current config {want}",
            ck_path.display()
        );
        info!("resuming from iteration {}", ck.train.n);
        truncate_log(&log_path, ck.train.n)?;
        ck
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        Checkpoint::init(cfg)?
    };
    run.inputs.insert("train".into(), manifest.digest.clone());

    let schedule = schedule_for(&ck)?;
    let batch = cfg.train.batch;
    let per_epoch = samples.len().div_ceil(batch).max(1) as u64;
    let loss_opts = cfg.train.loss_options();
    let stop = opts.max_steps.map_or(ck.train.total, |m| m.min(ck.train.total));
    let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&log_path)?);
    let mut order: Option<(u64, Vec<usize>)> = None;
    let mut last = None;
    while ck.train.n < stop {
        ensure!(!samples.is_empty(), "training split {} is empty", train_dir.display());
        let n = ck.train.n;
        let epoch = n / per_epoch;
        ck.train.epoch = epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(samples.len(), ck.train.seed, epoch)));
        }
        let idx = &order.as_ref().expect("order set").1;
        let start = (n % per_epoch) as usize * batch;
        let picked: Vec<&SceneSample> = idx[start..(start + batch).min(idx.len())].iter().map(|&i| &samples[i]).collect();
        let tb = TrainBatch::from_samples(&picked, cfg.train.esgm)?;
        let report = training_step(&mut ck.model, &mut ck.train, &tb, &schedule, loss_opts)?;
        let l = report.losses;
        let mut rec = serde_json::Map::new();
        rec.insert("step".into(), ck.train.n.into());
        rec.insert("epoch".into(), epoch.into());
        rec.insert("l_s".into(), l.l_s.into());
        rec.insert("l_m".into(), l.l_m.into());
        if loss_opts.consistency {
            rec.insert("l_c".into(), l.l_c.into());
        }
        rec.insert("total".into(), l.total.into());
        write_log_line(&mut log, &rec)?;
        last = Some(l);
        if cfg.train.checkpoint_every > 0 && ck.train.n % cfg.train.checkpoint_every == 0 {
            log.flush()?;
            ck.save(&ck_path)?;
        }
    }
    log.flush()?;
    ck.save(&ck_path)?;
    info!("trained to iteration {} of {}", ck.train.n, ck.train.total);
    run.outputs.insert("checkpoint".into(), file_digest(&ck_path)?);
    run.summary = serde_json::json!({
        "iteration": ck.train.n,
        "total": ck.train.total,
        "last_losses": last.map(|l| serde_json::json!({"l_s": l.l_s, "l_m": l.l_m, "l_c": l.l_c, "total": l.total})),
    });
    run.finish(out)?;
    Ok(ck)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DdpoOptions {
    /// Replace the KNN/KL reward with the brightness target from the config.
    pub toy_reward: bool,
}

/// Conditions rotate through the training scenes in order.
fn rotating_conditions(conditions: &[SampleRequest], update: usize, batch: usize) -> Vec<SampleRequest> {
    (0..batch).map(|i| conditions[(update * batch + i) % conditions.len()].clone()).collect()
}

/// Policy-gradient fine-tuning of `checkpoint`; writes the tuned checkpoint
/// and one log line per update into `out`.
pub fn ddpo(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, opts: DdpoOptions) -> Result<Vec<UpdateReport>> {
    let mut run = RunManifest::start("ddpo", cfg.hash(), cfg.seed);
    let mut ck = Checkpoint::load(checkpoint)?;
    run.inputs.insert("checkpoint".into(), file_digest(checkpoint)?);
    let schedule = schedule_for(&ck)?;
    let dcfg = cfg.ddpo.ddpo_config();
    ensure!(
        dcfg.steps <= schedule.steps(),
        "ddpo.steps {} exceeds the checkpoint's {} diffusion steps",
        dcfg.steps,
        schedule.steps()
    );
    let updates = if cfg.ddpo.enabled || opts.toy_reward {
        dcfg.updates
    } else {
        warn!("ddpo.enabled is false; the checkpoint is copied unchanged");
        0
    };

    let (train_manifest, train_samples) = read_dataset(&data.join("train"))?;
    run.inputs.insert("train".into(), train_manifest.digest.clone());
    let conditions = train_samples
        .iter()
        .map(|s| {
            Ok(SampleRequest {
                mask: training_condition(s, ck.config.train.esgm)?,
                categories: s.layout.category_ids.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(updates == 0 || !conditions.is_empty(), "no training scenes to condition rollouts on");

    let reward = if opts.toy_reward {
        RewardKind::Brightness {
            target: cfg.ddpo.toy_target,
        }
    } else {
        let config = cfg.ddpo.reward_config();
        config.validate(dcfg.batch)?;
        let (val_manifest, val_samples) = read_dataset(&data.join("val"))?;
        run.inputs.insert("val".into(), val_manifest.digest.clone());
        let images: Vec<_> = val_samples.iter().map(|s| s.image.clone()).collect();
        RewardKind::KnnKl {
            reference: RealReference::from_images(&images, config.feature_map)?,
            config,
        }
    };

    fs::create_dir_all(out)?;
    let mut optimizer = PolicyOptimizer::new(&ck.model, dcfg.optimizer);
    let seed = derive_seed(cfg.seed, &[DDPO_KEY]);
    let mut log = BufWriter::new(fs::File::create(out.join(DDPO_LOG_FILE))?);
    let mut reports = Vec::with_capacity(updates);
    for u in 0..updates {
        let global = ck.ddpo_updates as usize + u;
        let conds = rotating_conditions(&conditions, global, dcfg.batch);
        let r = ddpo_update(&mut ck.model, &mut optimizer, &conds, &schedule, &reward, &dcfg, global, seed)?;
        info!("ddpo update {global}: mean reward {:.6}, mean ratio {:.4}", r.mean_reward, r.mean_ratio);
        write_log_line(&mut log, &r)?;
        reports.push(r);
    }
    log.flush()?;
    ck.ddpo_updates += updates as u64;
    let ck_path = out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    run.outputs.insert("checkpoint".into(), file_digest(&ck_path)?);
    run.summary = serde_json::json!({
        "updates": updates,
        "first_mean_reward": reports.first().map(|r| r.mean_reward),
        "last_mean_reward": reports.last().map(|r| r.mean_reward),
    });
    run.finish(out)?;
    Ok(reports)
}

#[derive(Clone, Debug)]
pub enum LayoutSource {
    File(PathBuf),
    /// `n` layouts drawn from the checkpoint's scene spec.
    Random(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedLayout {
    pub scene_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub written: Vec<String>,
    pub skipped: Vec<SkippedLayout>,
}

pub fn cond_file(id: &str) -> String {
    format!("{id}_cond.pgm")
}

/// Renders one image per layout from a pool-composed shape condition.
/// Layouts needing a category the pool lacks are skipped and recorded.
pub fn sample_images(
    cfg: &RunConfig,
    checkpoint: &Path,
    pool_dir: &Path,
    layouts: &LayoutSource,
    out: &Path,
    force: bool,
) -> Result<SampleSummary> {
    let mut run = RunManifest::start("sample", cfg.hash(), cfg.seed);
    let ck = Checkpoint::load(checkpoint)?;
    run.inputs.insert("checkpoint".into(), file_digest(checkpoint)?);
    let pool = load_mask_pool(pool_dir, None)?;
    run.inputs.insert("pool".into(), tree_digest(pool_dir, &[])?);
    let spec = &ck.config.dataset.spec;
    let canvas = spec.canvas_size;
    let layouts: Vec<Layout> = match layouts {
        LayoutSource::File(path) => {
            run.inputs.insert("layouts".into(), file_digest(path)?);
            read_layouts(path)?
        }
        LayoutSource::Random(n) => (0..*n)
            .map(|i| generate_layout(spec, derive_seed(cfg.seed, &[RANDOM_LAYOUT_KEY, i as u64])))
            .collect::<Result<_, _>>()?,
    };
    let schedule = schedule_for(&ck)?;
    ensure!(
        cfg.sample.steps <= schedule.steps(),
        "sample.steps {} exceeds the checkpoint's {} diffusion steps",
        cfg.sample.steps,
        schedule.steps()
    );
    prepare_out_dir(out, force)?;

    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for (i, layout) in layouts.iter().enumerate() {
        layout.validate(canvas)?;
        match sample_shape_condition(layout, &pool, derive_seed(cfg.seed, &[SHAPE_KEY, i as u64]), canvas) {
            Ok(mask) => jobs.push((
                i,
                SampleRequest {
                    mask,
                    categories: layout.category_ids.clone(),
                },
            )),
            Err(e @ CoreError::PoolMiss(_)) => skipped.push(SkippedLayout {
                scene_id: layout.scene_id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let view = ck.model.shape_view();
    let base = derive_seed(cfg.seed, &[SAMPLE_KEY]);
    let images = parallel::try_map_range(jobs.len(), |j| {
        let (i, req) = &jobs[j];
        sample(&view, req, &schedule, cfg.sample.steps, cfg.sample.sampler, derive_seed(base, &[*i as u64]), false)
    })?;
    let mut written = Vec::with_capacity(jobs.len());
    let mut kept = Vec::with_capacity(jobs.len());
    for ((i, req), img) in jobs.iter().zip(&images) {
        let id = &layouts[*i].scene_id;
        write_image(&out.join(image_file(id)), &img.image)?;
        write_mask(&out.join(cond_file(id)), &req.mask)?;
        written.push(id.clone());
        kept.push(layouts[*i].clone());
    }
    write_layouts(&out.join(LAYOUTS_FILE), &kept)?;
    let summary = SampleSummary { written, skipped };
    fs::write(out.join(SAMPLES_FILE), serde_json::to_vec_pretty(&summary)?)?;
    info!("wrote {} samples, skipped {}", summary.written.len(), summary.skipped.len());
    run.outputs.insert("samples".into(), tree_digest(out, &[RUN_MANIFEST_FILE])?);
    run.summary = serde_json::json!({ "written": summary.written.len(), "skipped": summary.skipped });
    run.finish(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub shape: ShapeFidelityReport,
    /// Kernel MMD between generated and reference features; absent with
    /// fewer than two matched scenes.
    pub mmd: Option<MmdTest>,
}

/// Shape fidelity of every layout instance plus feature MMD between the
/// matched generated and reference images.
pub fn eval(cfg: &RunConfig, generated: &Path, reference: &Path, layouts_file: &Path, out: &Path) -> Result<EvalOutput> {
    let mut run = RunManifest::start("eval", cfg.hash(), cfg.seed);
    let layouts = read_layouts(layouts_file)?;
    run.inputs.insert("layouts".into(), file_digest(layouts_file)?);
    run.inputs.insert("generated".into(), tree_digest(generated, &[RUN_MANIFEST_FILE])?);
    run.inputs.insert("reference".into(), tree_digest(reference, &[RUN_MANIFEST_FILE])?);
    let shape = evaluate_pairs(generated, reference, &layouts, &cfg.eval.metrics())?;

    let mut gen_feats = Vec::new();
    let mut ref_feats = Vec::new();
    for l in &layouts {
        let name = image_file(&l.scene_id);
        let (g, r) = (generated.join(&name), reference.join(&name));
        if g.exists() && r.exists() {
            gen_feats.push(image_features(&read_image(&g)?)?);
            ref_feats.push(image_features(&read_image(&r)?)?);
        }
    }
    let mmd = if gen_feats.len() >= 2 {
        Some(mmd_permutation_test(
            &gen_feats,
            &ref_feats,
            None,
            cfg.eval.mmd_permutations.max(1),
            derive_seed(cfg.seed, &[MMD_KEY]),
        )?)
    } else {
        warn!("fewer than two matched scenes; MMD not computed");
        None
    };

    fs::create_dir_all(out)?;
    let output = EvalOutput { shape, mmd };
    fs::write(out.join(REPORT_JSON), serde_json::to_vec_pretty(&output)?)?;
    let mut table = output.shape.to_table();
    match &output.mmd {
        Some(m) => table.push_str(&format!(
            "MMD^2 {:.6} (bandwidth {:.4}, null sd {:.6}, p {:.3}, {} permutations)\n",
            m.mmd2, m.bandwidth, m.null_std, m.p_value, m.permutations
        )),
        None => table.push_str("MMD^2 -\n"),
    }
    fs::write(out.join(REPORT_TXT), table)?;
    run.outputs.insert("report".into(), file_digest(&out.join(REPORT_JSON))?);
    run.summary = serde_json::json!({
        "overall": output.shape.overall,
        "mmd2": output.mmd.as_ref().map(|m| m.mmd2),
    });
    run.finish(out)?;
    Ok(output)
}

/// Reads `--config` (or defaults) and applies a `--seed` override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Per-file digests of a directory, for comparing two runs.
pub fn digest_map(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .map_err(|_| anyhow!("{} is outside {}", path.display(), dir.display()))?;
                out.insert(rel.to_string_lossy().into_owned(), file_digest(&path)?);
            }
        }
    }
    Ok(out)
}
