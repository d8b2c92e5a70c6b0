mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::{ofdiff, ofdiff_ok, tiny_config, write_config};
use ofdiff_cli::checkpoint::Checkpoint;
use ofdiff_cli::commands::{self, DdpoOptions, LayoutSource, TrainOptions, CHECKPOINT_FILE, DDPO_LOG_FILE, TRAIN_LOG_FILE};
use ofdiff_cli::manifest::read_run_manifests;
use ofdiff_cli::RunConfig;
use ofdiff_core::diffusion::Sampler;
use ofdiff_core::scene::{read_manifest, write_layouts, Layout, OrientedBox, LAYOUTS_FILE};
use tempfile::tempdir;

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn defaults_are_valid_and_hash_is_stable() {
    let a = RunConfig::default();
    a.validate().unwrap();
    assert_eq!(a.hash(), RunConfig::from_toml_str("").unwrap().hash());
    let mut b = a.clone();
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn unknown_keys_fail_with_their_path() {
    for (text, path) in [
        ("sede = 1", "sede"),
        ("[train]\nbatchh = 2", "train.batchh"),
        ("[dataset.spec]\ncanvas = 32", "dataset.spec.canvas"),
        ("[[dataset.spec.categories]]\nid = 0\nglyph = \"circle\"\nsize_range = [6.0, 9.0]\ncolour = 1", "dataset.spec.categories[0].colour"),
    ] {
        let err = format!("{:#}", RunConfig::from_toml_str(text).unwrap_err());
        assert!(err.contains(&format!("`{path}`")), "{text:?} -> {err}");
    }
}

#[test]
fn invalid_values_name_the_key() {
    for (text, key) in [
        ("[dataset.spec]\ncanvas_size = 30", "dataset.spec"),
        ("[train]\nbatch = 0", "train.batch"),
        ("[train]\ntimesteps = 10\n[sample]\nsteps = 20", "sample.steps"),
        ("[model]\nnum_categories = 2", "dataset.spec.categories"),
    ] {
        let err = format!("{:#}", RunConfig::from_toml_str(text).unwrap_err());
        assert!(err.contains(&format!("`{key}`")), "{text:?} -> {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(5);
    commands::gen_data(&cfg, &dir.path().join("data"), false).unwrap();
    let ck = commands::train(&cfg, &dir.path().join("data"), &dir.path().join("run"), TrainOptions::default()).unwrap();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(back.train, ck.train);
    let on_disk = fs::read(dir.path().join("run").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(on_disk, bytes);

    let mut cut = bytes.clone();
    cut.truncate(bytes.len() - 8);
    assert!(Checkpoint::from_bytes(&cut).is_err());
    let text = String::from_utf8_lossy(&bytes[..200]).replace("\"seed\":5", "\"seed\":6");
    let mut tampered = text.into_bytes();
    tampered.extend_from_slice(&bytes[200..]);
    let err = Checkpoint::from_bytes(&tampered).err().expect("hash mismatch detected");
    assert!(format!("{err:#}").contains("hash"), "{err:#}");
}

#[test]
fn gen_data_is_deterministic_and_refuses_nonempty_output() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(7);
    cfg.dataset.train_count = 10;
    let a = commands::gen_data(&cfg, &dir.path().join("a"), false).unwrap();
    let b = commands::gen_data(&cfg, &dir.path().join("b"), false).unwrap();
    assert_eq!(a.train.digest, b.train.digest);
    assert_eq!(a.val.digest, b.val.digest);
    assert_ne!(a.train.digest, a.val.digest);
    let err = commands::gen_data(&cfg, &dir.path().join("a"), false).err().unwrap();
    assert!(format!("{err:#}").contains("--force"));
    let again = commands::gen_data(&cfg, &dir.path().join("a"), true).unwrap();
    assert_eq!(again.train.digest, a.train.digest);
    assert_eq!(read_run_manifests(&dir.path().join("a")).unwrap().len(), 1);
}

#[test]
fn zero_count_gives_a_valid_empty_dataset() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(1);
    cfg.dataset.train_count = 0;
    cfg.dataset.val_count = 0;
    let out = commands::gen_data(&cfg, dir.path(), false).unwrap();
    assert_eq!(out.train.count, 0);
    assert!(!out.pool_written);
    assert_eq!(read_manifest(&dir.path().join("train")).unwrap().scene_ids.len(), 0);
}

#[test]
fn toggles_off_log_only_shape_and_mix_losses() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(2);
    cfg.train.esgm = false;
    cfg.train.dcloss = false;
    cfg.train.iterations = 1;
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    commands::train(&cfg, &data, &dir.path().join("run"), TrainOptions::default()).unwrap();
    let lines = log_lines(&dir.path().join("run").join(TRAIN_LOG_FILE));
    assert_eq!(lines.len(), 1);
    let keys: BTreeSet<&str> = lines[0].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["epoch", "l_m", "l_s", "step", "total"]));
    let l = &lines[0];
    let sum = l["l_s"].as_f64().unwrap() + l["l_m"].as_f64().unwrap();
    assert!((l["total"].as_f64().unwrap() - sum).abs() <= 1e-12);
}

#[test]
fn zero_iterations_save_the_initialization() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(4);
    cfg.train.iterations = 0;
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    let ck = commands::train(&cfg, &data, &dir.path().join("run"), TrainOptions::default()).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), Checkpoint::init(&cfg).unwrap().to_bytes().unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    ofdiff_core::parallel::set_sequential(true);
    let dir = tempdir().unwrap();
    let cfg = tiny_config(9);
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    let whole = commands::train(&cfg, &data, &dir.path().join("whole"), TrainOptions::default()).unwrap();
    let split = dir.path().join("split");
    let part = commands::train(&cfg, &data, &split, TrainOptions { max_steps: Some(3) }).unwrap();
    assert_eq!(part.train.n, 3);
    let resumed = commands::train(&cfg, &data, &split, TrainOptions::default()).unwrap();
    assert_eq!(resumed.to_bytes().unwrap(), whole.to_bytes().unwrap());
    assert_eq!(
        fs::read(split.join(TRAIN_LOG_FILE)).unwrap(),
        fs::read(dir.path().join("whole").join(TRAIN_LOG_FILE)).unwrap()
    );

    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    let err = commands::train(&other, &data, &split, TrainOptions::default()).err().unwrap();
    assert!(format!("{err:#}").contains("refusing to resume"), "{err:#}");
}

#[test]
fn ddpo_with_zero_updates_copies_the_checkpoint() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(6);
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    commands::train(&cfg, &data, &dir.path().join("run"), TrainOptions::default()).unwrap();
    let input = dir.path().join("run").join(CHECKPOINT_FILE);

    cfg.ddpo.updates = 0;
    let reports = commands::ddpo(&cfg, &input, &data, &dir.path().join("zero"), DdpoOptions::default()).unwrap();
    assert!(reports.is_empty());
    assert_eq!(fs::read(&input).unwrap(), fs::read(dir.path().join("zero").join(CHECKPOINT_FILE)).unwrap());

    cfg.ddpo.updates = 3;
    let out = dir.path().join("three");
    let reports = commands::ddpo(&cfg, &input, &data, &out, DdpoOptions::default()).unwrap();
    assert_eq!(reports.len(), 3);
    let lines = log_lines(&out.join(DDPO_LOG_FILE));
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["update"].as_u64(), Some(i as u64));
        for key in ["mean_reward", "mean_ratio", "clipped_fraction"] {
            assert!(l[key].is_f64(), "missing {key}");
        }
    }
    let tuned = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(tuned.ddpo_updates, 3);
    assert_ne!(tuned.model.params(), Checkpoint::load(&input).unwrap().model.params());
}

#[test]
fn sampling_writes_one_image_and_condition_per_layout() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(8);
    cfg.sample.sampler = Sampler::Deterministic;
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    commands::train(&cfg, &data, &dir.path().join("run"), TrainOptions::default()).unwrap();
    let ck = dir.path().join("run").join(CHECKPOINT_FILE);
    let pool = data.join("pool");

    let a = dir.path().join("a");
    let summary = commands::sample_images(&cfg, &ck, &pool, &LayoutSource::Random(5), &a, false).unwrap();
    assert_eq!(summary.written.len(), 5);
    let names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with("_cond.pgm")).count(), 5);

    let b = dir.path().join("b");
    commands::sample_images(&cfg, &ck, &pool, &LayoutSource::Random(5), &b, false).unwrap();
    let strip = |m: std::collections::BTreeMap<String, String>| {
        m.into_iter().filter(|(k, _)| k != "run_manifest.jsonl").collect::<Vec<_>>()
    };
    assert_eq!(strip(commands::digest_map(&a).unwrap()), strip(commands::digest_map(&b).unwrap()));

    let val_layouts = data.join("val").join(LAYOUTS_FILE);
    let v = dir.path().join("v");
    let summary = commands::sample_images(&cfg, &ck, &pool, &LayoutSource::File(val_layouts), &v, false).unwrap();
    assert_eq!(summary.written, read_manifest(&data.join("val")).unwrap().scene_ids);
}

#[test]
fn pool_misses_are_skipped_and_recorded() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(10);
    cfg.dataset.spec.categories.truncate(2);
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    commands::train(&cfg, &data, &dir.path().join("run"), TrainOptions::default()).unwrap();
    let layouts = vec![
        Layout {
            scene_id: "has-pool".into(),
            boxes: vec![OrientedBox::new(16.0, 16.0, 9.0, 9.0, 0.3)],
            category_ids: vec![1],
        },
        Layout {
            scene_id: "no-pool".into(),
            boxes: vec![OrientedBox::new(16.0, 16.0, 12.0, 12.0, 0.0)],
            category_ids: vec![2],
        },
    ];
    let file = dir.path().join("layouts.jsonl");
    write_layouts(&file, &layouts).unwrap();
    let out = dir.path().join("s");
    let summary = commands::sample_images(
        &cfg,
        &dir.path().join("run").join(CHECKPOINT_FILE),
        &data.join("pool"),
        &LayoutSource::File(file),
        &out,
        false,
    )
    .unwrap();
    assert_eq!(summary.written, vec!["has-pool".to_string()]);
    assert_eq!(summary.skipped.len(), 1);
    assert_eq!(summary.skipped[0].scene_id, "no-pool");
    let manifest = &read_run_manifests(&out).unwrap()[0];
    assert_eq!(manifest.summary["skipped"][0]["scene_id"], "no-pool");
}

#[test]
fn self_evaluation_is_perfect_and_aggregates_are_row_means() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(11);
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    let val = data.join("val");
    let out = dir.path().join("eval");
    let report = commands::eval(&cfg, &val, &val, &val.join(LAYOUTS_FILE), &out).unwrap();
    let shape = &report.shape;
    assert!(shape.instance_count > 0);
    let overall = shape.overall.as_ref().unwrap();
    assert_eq!((overall.iou, overall.dice, overall.ssim), (1.0, 1.0, 1.0));
    if let Some(cd) = overall.chamfer {
        assert_eq!(cd, 0.0);
    }
    let n = shape.instances.len() as f64;
    let mean_iou = shape.instances.iter().map(|r| r.iou).sum::<f64>() / n;
    assert!((overall.iou - mean_iou).abs() < 1e-12);

    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let keys: BTreeSet<&str> = json["shape"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        BTreeSet::from(["empty_edge", "instance_count", "instances", "overall", "per_category", "skipped"])
    );
    for key in ["scene_id", "index", "category_id", "iou", "dice", "ssim", "chamfer", "hausdorff", "edge_pixels"] {
        assert!(json["shape"]["instances"][0].get(key).is_some(), "row lacks {key}");
    }
    for key in ["mmd2", "bandwidth", "null_std", "p_value", "permutations"] {
        assert!(json["mmd"].get(key).is_some(), "mmd lacks {key}");
    }
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("IoU"));
}

#[test]
fn eval_on_a_hand_fixture_matches_row_means() {
    // Two generated scenes, one identical to its reference and one blank.
    let dir = tempdir().unwrap();
    let cfg = tiny_config(12);
    let data = dir.path().join("data");
    commands::gen_data(&cfg, &data, false).unwrap();
    let val = data.join("val");
    let ids = read_manifest(&val).unwrap().scene_ids;
    let gen = dir.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    let name0 = ofdiff_core::scene::image_file(&ids[0]);
    let name1 = ofdiff_core::scene::image_file(&ids[1]);
    fs::copy(val.join(&name0), gen.join(&name0)).unwrap();
    let blank = ofdiff_core::numerics::Tensor::full(&[3, 32, 32], 0.5);
    ofdiff_core::scene::write_image(&gen.join(&name1), &blank).unwrap();
    let all = ofdiff_core::scene::read_layouts(&val.join(LAYOUTS_FILE)).unwrap();
    let layouts_file = dir.path().join("two.jsonl");
    write_layouts(&layouts_file, &all[..3]).unwrap();

    let report = commands::eval(&cfg, &gen, &val, &layouts_file, &dir.path().join("eval")).unwrap().shape;
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].scene_id, ids[2]);
    let rows = &report.instances;
    assert_eq!(rows.len(), all[0].len() + all[1].len());
    for r in rows {
        if r.scene_id == ids[0] {
            assert_eq!(r.iou, 1.0);
        } else {
            assert_eq!(r.edge_pixels.0, 0);
        }
    }
    let overall = report.overall.unwrap();
    let n = rows.len() as f64;
    for (got, want) in [
        (overall.iou, rows.iter().map(|r| r.iou).sum::<f64>() / n),
        (overall.dice, rows.iter().map(|r| r.dice).sum::<f64>() / n),
        (overall.ssim, rows.iter().map(|r| r.ssim).sum::<f64>() / n),
    ] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn binary_reports_config_errors_as_json_lines() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchh = 3\n").unwrap();
    let out = ofdiff(&["--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap(), "gen-data"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(line["level"], "error");
    assert!(line["message"].as_str().unwrap().contains("`train.batchh`"));
}

#[test]
fn binary_runs_the_pipeline() {
    let dir = tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = tiny_config(13);
    write_config(&cfg, &dir.path().join("cfg.toml"));
    let c = p("cfg.toml");
    ofdiff_ok(&["--config", &c, "--out", &p("data"), "gen-data"]);
    ofdiff_ok(&["--config", &c, "--out", &p("run"), "train", "--data", &p("data")]);
    ofdiff_ok(&[
        "--config", &c, "--out", &p("tuned"), "ddpo", "--checkpoint", &p("run/checkpoint.ckpt"), "--data", &p("data"),
        "--toy-reward",
    ]);
    ofdiff_ok(&[
        "--config", &c, "--out", &p("samples"), "sample", "--checkpoint", &p("tuned/checkpoint.ckpt"), "--pool",
        &p("data/pool"), "--random-layouts", "3",
    ]);
    let out = ofdiff_ok(&[
        "--config", &c, "--out", &p("eval"), "eval", "--generated", &p("samples"), "--reference", &p("samples"),
        "--layouts", &p("samples/layouts.jsonl"),
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("IoU"));
    assert_eq!(log_lines(&dir.path().join("tuned").join(DDPO_LOG_FILE)).len(), cfg.ddpo.updates);
    let missing = ofdiff(&["--config", &c, "--out", &p("s2"), "sample", "--checkpoint", &p("run/checkpoint.ckpt"), "--pool", &p("data/pool")]);
    assert!(!missing.status.success());
}
