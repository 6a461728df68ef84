//! End-to-end runs of the `cfdiff` binary on small corpora and fixed-output checkpoints.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use cfdiff::io::config::{ConfigSection, RunConfig};
use cfdiff::io::container::TensorContainer;
use cfdiff::io::corpus::split_path;
use cfdiff::io::pgm;
use cfdiff::synth::{CorpusSpec, Split};
use cfdiff::{ImageTensor, NoiseSchedule, ScheduleKind};
use cfdiff_denoiser::{checkpoint, Architecture, Denoiser};
use tempfile::TempDir;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.cfg");

fn cfdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdiff"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The default config pointed at `dir`, with a small corpus.
fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(DEFAULT_CONFIG).unwrap();
    cfg.set("run", "out", dir.join("out").display());
    cfg.set("run", "corpus", dir.join("corpus").display());
    cfg.set("run", "checkpoint", dir.join("model.cfd").display());
    cfg.set("run", "workers", 2);
    CorpusSpec {
        train: 24,
        val: 6,
        test: 8,
        ..CorpusSpec::default()
    }
    .write(&mut cfg);
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.cfg");
    cfg.save(&path).unwrap();
    path
}

fn constant_checkpoint(path: &Path, values: [f32; 3]) {
    let model = Denoiser::new(Architecture::Constant { in_channels: 2, values }, 0, DType::F32).unwrap();
    let sched = NoiseSchedule::build(1000, ScheduleKind::default()).unwrap();
    checkpoint::save(path, &model, &sched, &RunConfig::new()).unwrap();
}

fn synth(dir: &Path, cfg: &RunConfig) {
    let o = cfdiff(&["synth", "--config", path_str(&write_config(dir, cfg))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn default_synth_is_reproducible_and_complete() {
    let dir = TempDir::new().unwrap();
    let mut cfg = RunConfig::parse(DEFAULT_CONFIG).unwrap();
    let cfg_path = dir.path().join("default.cfg");
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        cfg.set("run", "corpus", dir.path().join(run).display());
        cfg.save(&cfg_path).unwrap();
        let o = cfdiff(&["synth", "--config", path_str(&cfg_path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path().join(run))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        listings.push(files);
    }
    let names: Vec<&str> = listings[0].iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["manifest.txt", "test.cfd", "train.cfd", "val.cfd"]);
    assert_eq!(listings[0], listings[1]);
}

#[test]
fn seed_flag_reseeds_the_corpus() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let read = |sub: &str| std::fs::read(split_path(&dir.path().join(sub), Split::Val)).unwrap();
    for (sub, seed) in [("s1", "1"), ("s2", "2"), ("s1b", "1")] {
        let out = dir.path().join(sub);
        let o = cfdiff(&["synth", "--config", path_str(&path), "--seed", seed, "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read("s1"), read("s1b"));
    assert_ne!(read("s1"), read("s2"));
}

#[test]
fn missing_key_is_named() {
    let dir = TempDir::new().unwrap();
    let text = DEFAULT_CONFIG.replace("rim_width = 0.2\n", "");
    let path = dir.path().join("broken.cfg");
    std::fs::write(&path, text).unwrap();
    let o = cfdiff(&["synth", "--config", path_str(&path)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("corpus.rim_width"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let text = DEFAULT_CONFIG.replace("[corpus]\n", "[corpus]\nlesion_count = 3\n");
    let path = dir.path().join("extra.cfg");
    std::fs::write(&path, text).unwrap();
    let o = cfdiff(&["synth", "--config", path_str(&path)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("corpus.lesion_count"), "{}", stderr(&o));
}

#[test]
fn constant_checkpoint_at_unit_guidance_reproduces_the_input() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.set("sampler", "norm", "none");
    synth(dir.path(), &cfg);
    // Null and Healthy predict the same, so encoding with one and decoding with the other inverts.
    let ckpt = dir.path().join("const.cfd");
    constant_checkpoint(&ckpt, [0.3, -0.2, 0.3]);

    let input = split_path(&dir.path().join("corpus"), Split::Test);
    let out = dir.path().join("cf");
    let o = cfdiff(&[
        "counterfactual",
        "--config",
        path_str(&write_config(dir.path(), &cfg)),
        "--checkpoint",
        path_str(&ckpt),
        "--input",
        path_str(&input),
        "--out",
        path_str(&out),
        "--w",
        "1",
        "--L",
        "50",
        "--pgm",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let x = TensorContainer::read(&input).unwrap().image("images").unwrap();
    let cf = TensorContainer::read(&out.join("counterfactual.cfd")).unwrap().image("counterfactual").unwrap();
    assert!(x.max_abs_diff(&cf).unwrap() < 1e-5);
    let hm = TensorContainer::read(&out.join("heatmap.cfd")).unwrap().image("heatmap").unwrap();
    assert_eq!(hm.shape(), [x.batch(), 1, 32, 32]);
    assert!(hm.data().iter().all(|v| v.abs() < 1e-5));

    let bytes = std::fs::read(out.join("input_000.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 32 * 32);
    let (w, h, px) = pgm::decode(&bytes).unwrap();
    assert_eq!((w, h, px.len()), (32, 32, 1024));
}

#[test]
fn input_channels_must_match_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("const.cfd");
    constant_checkpoint(&ckpt, [0.0; 3]);
    let mut c = TensorContainer::new();
    c.push_image("images", &ImageTensor::zeros([1, 3, 8, 8])).unwrap();
    let input = dir.path().join("three.cfd");
    c.write(&input).unwrap();
    let o = cfdiff(&[
        "counterfactual",
        "--checkpoint",
        path_str(&ckpt),
        "--input",
        path_str(&input),
        "--out",
        path_str(dir.path()),
    ]);
    assert!(!o.status.success());
}

fn heatmap_container(dir: &Path, exact: bool) -> PathBuf {
    let masks: Vec<_> = (0..3)
        .map(|b| cfdiff::tensor::BinaryMask::from_fn(16, 16, |y, x| (y + b) % 5 == 0 && x > 4))
        .collect();
    let hm = ImageTensor::from_fn([3, 1, 16, 16], |b, _, y, x| {
        if exact {
            masks[b].get(y, x) as u8 as f32
        } else {
            ((b * 31 + y * 7 + x * 13) % 17) as f32
        }
    });
    let mut c = TensorContainer::new();
    c.push_image("heatmap", &hm).unwrap();
    c.push_masks("mask", &masks).unwrap();
    let path = dir.join(if exact { "exact.cfd" } else { "noise.cfd" });
    c.write(&path).unwrap();
    path
}

#[test]
fn eval_of_exact_heatmaps_scores_one() {
    let dir = TempDir::new().unwrap();
    let path = heatmap_container(dir.path(), true);
    let out = dir.path().join("out");
    let o = cfdiff(&["eval", "--heatmaps", path_str(&path), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][4], "1");
    assert_eq!(rows[0][5], "1");
}

#[test]
fn eval_exit_code_tracks_thresholds() {
    let dir = TempDir::new().unwrap();
    let path = heatmap_container(dir.path(), false);
    let mut cfg = small_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);
    let o = cfdiff(&["eval", "--config", path_str(&cfg_path), "--heatmaps", path_str(&path)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("threshold violated"));

    cfg.set("thresholds", "min_ceil_dice", 0.01);
    let cfg_path = write_config(dir.path(), &cfg);
    let o = cfdiff(&["eval", "--config", path_str(&cfg_path), "--heatmaps", path_str(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn eval_scores_model_and_baseline() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.set("sampler", "L", 5);
    cfg.set("sampler", "ddim_steps", 10);
    cfg.set("thresholds", "min_ceil_dice", 0.0);
    cfg.set("thresholds", "min_margin_over_baseline", -1.0);
    synth(dir.path(), &cfg);
    constant_checkpoint(&dir.path().join("model.cfd"), [0.1, 0.2, 0.3]);
    let o = cfdiff(&["eval", "--config", path_str(&write_config(dir.path(), &cfg))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("out/eval.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["model", "threshold"]);
    // the echo reproduces the run
    let echo = RunConfig::load(&dir.path().join("out/eval.cfg")).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn sweep_has_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.set("sampler", "ddim_steps", 10);
    cfg.set("sweep", "w", "1, 2");
    cfg.set("sweep", "depth", "0.1, 0.3, 0.5");
    synth(dir.path(), &cfg);
    constant_checkpoint(&dir.path().join("model.cfd"), [0.1, 0.2, 0.3]);
    let o = cfdiff(&["sweep", "--config", path_str(&write_config(dir.path(), &cfg))]);
    assert!(o.status.code().is_some(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("out/sweep.csv"));
    assert_eq!(rows.len(), 6);
    let cells: Vec<(&str, &str)> = rows.iter().map(|r| (r[1].as_str(), r[2].as_str())).collect();
    assert_eq!(cells, [("1", "1"), ("1", "3"), ("1", "5"), ("2", "1"), ("2", "3"), ("2", "5")]);
}

#[test]
fn ablate_has_four_variant_rows() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.set("sampler", "L", 4);
    cfg.set("sampler", "ddim_steps", 10);
    let (plain, full) = (dir.path().join("plain.cfd"), dir.path().join("full.cfd"));
    cfg.set("ablate", "plain", plain.display());
    cfg.set("ablate", "full", full.display());
    synth(dir.path(), &cfg);
    constant_checkpoint(&plain, [0.1, 0.2, 0.3]);
    constant_checkpoint(&full, [0.0, 0.5, 0.1]);
    let o = cfdiff(&["ablate", "--config", path_str(&write_config(dir.path(), &cfg))]);
    // constant models localize nothing, so the configured thresholds fail
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("out/ablate.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["cdpm", "+guidance", "+attention", "+dn"]);
    assert_eq!(rows[0][1], "1");
    assert_eq!(rows[0][8], "none");
    assert_eq!(rows[3][8], "dynamic");
}

#[test]
fn training_logs_drop_fraction_and_writes_a_loadable_checkpoint() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.set("train", "steps", 30);
    cfg.set("train", "batch_size", 4);
    cfg.set("architecture", "width", 8);
    cfg.set("architecture", "inner_width", 16);
    cfg.set("architecture", "groups", 4);
    synth(dir.path(), &cfg);
    let o = cfdiff(&["train", "--config", path_str(&write_config(dir.path(), &cfg))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("realized drop fraction"), "{out}");
    assert!(stderr(&o).contains("realized drop fraction"));
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,ema_loss\n"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 31);
    assert!(log.contains("# null_fraction"));

    let ckpt = checkpoint::load(&dir.path().join("model.cfd")).unwrap();
    assert_eq!(ckpt.config.get("train", "steps"), Some("30"));
    assert_eq!(ckpt.schedule.len(), 1000);
}

#[test]
fn missing_corpus_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let o = cfdiff(&["train", "--config", path_str(&write_config(dir.path(), &cfg))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("corpus split not found"), "{}", stderr(&o));
}
