//! End-to-end tests driving the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bamrl_cli::config::RunConfig;
use bamrl_core::checkpoint;
use bamrl_core::policy::{ArchitectureConfig, ConvSpec, PolicyNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bamrl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

/// Fresh per-test scratch directory under the target tmp dir.
fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear scratch dir");
    }
    fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

/// A config that keeps runs fast: one drop per episode, one eval episode.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.environment.drops_per_episode = 1;
    cfg.evaluation.episodes = 1;
    cfg.evaluation.epsilon_grid = vec![0.25];
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_json()).expect("write config");
    path
}

#[test]
fn count_params_presets() {
    let out = run(&["count-params", "--arch", "bam"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "136151\n");

    let out = run(&["count-params", "--arch", "baseline"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "136012\n");
}

#[test]
fn count_params_reads_architecture_files() {
    let dir = scratch("count-params-files");

    let conv_only = ArchitectureConfig {
        input_frames: 2,
        input_height: 4,
        input_width: 4,
        convs: vec![ConvSpec {
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 0,
        }],
        bam_after_conv: None,
        bam_reduction: 1,
        bam_dilation: 1,
        hidden: 0,
        actions: 0,
        value_head: false,
    };
    let arch_path = dir.join("conv.json");
    fs::write(&arch_path, serde_json::to_string(&conv_only).unwrap()).unwrap();
    let out = run(&["count-params", "--config", arch_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "76\n");

    // A full run config works too; its architecture section is counted.
    let run_path = dir.join("run.json");
    fs::write(&run_path, RunConfig::default().to_json()).unwrap();
    let out = run(&["count-params", "--config", run_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "136151\n");
}

#[test]
fn count_params_rejects_bad_input() {
    let dir = scratch("count-params-bad");
    let path = dir.join("broken.json");
    fs::write(&path, "{not json").unwrap();
    let out = run(&["count-params", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error"));

    let out = run(&["count-params"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&[
        "count-params",
        "--arch",
        "bam",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--no-such-flag"));
}

#[test]
fn train_steps_zero_emits_fresh_checkpoint() {
    let dir = scratch("train-zero");
    let cfg = small_config(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--steps",
        "0",
        "--arch",
        "bam",
        "--seed",
        "11",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    // Log holds the header only: no updates ran.
    let log = fs::read_to_string(out_dir.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("update_index,"));

    // The resolved config records the seed it ran with.
    let saved: RunConfig =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.seed, 11);
    assert_eq!(saved.training.seed, 11);

    // The checkpoint is exactly the seeded initialization.
    let loaded: PolicyNetwork<f32> = checkpoint::load(&out_dir.join("checkpoint.bin")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let expected = PolicyNetwork::<f32>::init(saved.architecture.clone(), &mut rng).unwrap();
    assert_eq!(
        flatten(&expected),
        flatten(&loaded),
        "checkpoint differs from seeded initialization"
    );
}

fn flatten(net: &PolicyNetwork<f32>) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |name, t| out.push((name, t.data().to_vec())));
    out
}

#[test]
fn seeded_training_runs_are_byte_identical() {
    let dir = scratch("train-determinism");
    let cfg = small_config(&dir);
    for name in ["a", "b"] {
        let out_dir = dir.join(name);
        let out = run(&[
            "train",
            "--steps",
            "320",
            "--arch",
            "bam",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    for file in ["checkpoint.bin", "training_log.csv", "config.json"] {
        let a = fs::read(dir.join("a").join(file)).unwrap();
        let b = fs::read(dir.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical seeded runs");
    }
}

fn train_small_checkpoint(dir: &Path, arch: &str, seed: &str) -> PathBuf {
    let cfg = small_config(dir);
    let out_dir = dir.join(format!("train-{arch}"));
    let out = run(&[
        "train",
        "--steps",
        "0",
        "--arch",
        arch,
        "--seed",
        seed,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    out_dir.join("checkpoint.bin")
}

#[test]
fn eval_writes_reports_and_reruns_identically() {
    let dir = scratch("eval-reports");
    let ckpt = train_small_checkpoint(&dir, "bam", "3");
    let cfg = dir.join("cfg.json");
    for name in ["a", "b"] {
        let out_dir = dir.join(name);
        let out = run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--eps-grid",
            "0.1,0.25",
            "--seed",
            "9",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }

    let csv = fs::read_to_string(dir.join("a").join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 2, "header plus three rows per ε");
    assert!(lines[0].starts_with("epsilon,regime,"));
    assert!(lines[1].starts_with("0.1,clean,"));
    assert!(lines[3].starts_with("0.1,attacked_recovery,"));

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("a").join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["reports"].as_array().unwrap().len(), 2);
    assert_eq!(json["reports"][1]["epsilon"], 0.25);

    for file in ["metrics.csv", "metrics.json", "config.json"] {
        let a = fs::read(dir.join("a").join(file)).unwrap();
        let b = fs::read(dir.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical seeded runs");
    }
}

#[test]
fn eval_on_plain_checkpoint_skips_defense_columns() {
    let dir = scratch("eval-plain");
    let ckpt = train_small_checkpoint(&dir, "baseline", "3");
    let cfg = dir.join("cfg.json");
    let out_dir = dir.join("out");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2, "clean and attacked rows only");
    assert!(lines[1].ends_with(",,,,,"), "defense columns stay empty");
    assert!(!csv.contains("attacked_recovery"));
}

#[test]
fn eval_empty_grid_from_config_exits_2() {
    let dir = scratch("eval-empty-grid");
    let ckpt = train_small_checkpoint(&dir, "bam", "3");
    let mut cfg = RunConfig::default();
    cfg.environment.drops_per_episode = 1;
    cfg.evaluation.epsilon_grid.clear();
    let cfg_path = dir.join("empty.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty attack sweep"));
}

#[test]
fn eval_architecture_mismatch_exits_2() {
    let dir = scratch("eval-mismatch");
    let ckpt = train_small_checkpoint(&dir, "bam", "3");

    // A 16x16 pipeline: config is self-consistent, checkpoint is 32x32.
    let mut cfg = RunConfig::default();
    cfg.environment.obs_height = 16;
    cfg.environment.obs_width = 16;
    cfg.architecture.input_height = 16;
    cfg.architecture.input_width = 16;
    let cfg_path = dir.join("small-obs.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checkpoint expects"));
}

#[test]
fn eval_corrupted_checkpoint_exits_2() {
    let dir = scratch("eval-corrupt");
    let bad = dir.join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("magic"));
}

#[test]
fn dump_maps_writes_p5_images() {
    let dir = scratch("dump-maps");
    let ckpt = train_small_checkpoint(&dir, "bam", "3");
    let cfg = dir.join("cfg.json");
    let out_dir = dir.join("maps");
    let out = run(&[
        "dump-maps",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let kinds = ["obs", "clean", "attacked", "attention", "cleaned"];
    for i in 0..5 {
        for kind in kinds {
            let path = out_dir.join(format!("state{i}_{kind}.pgm"));
            let bytes = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(bytes.starts_with(b"P5\n"), "{} is not binary PGM", path.display());
        }
    }
    // Observations are 32x32, pre-attention activations 16x16.
    let obs = fs::read(out_dir.join("state0_obs.pgm")).unwrap();
    assert!(obs.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(obs.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
    let att = fs::read(out_dir.join("state0_attention.pgm")).unwrap();
    assert!(att.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn dump_maps_needs_attention_layer() {
    let dir = scratch("dump-maps-plain");
    let ckpt = train_small_checkpoint(&dir, "baseline", "3");
    let out = run(&[
        "dump-maps",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        dir.join("cfg.json").to_str().unwrap(),
        "--out",
        dir.join("maps").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("attention"));
}

#[test]
fn diverged_training_exits_3_and_keeps_last_good_checkpoint() {
    let dir = scratch("train-diverge");
    let cfg = small_config(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--steps",
        "320",
        "--arch",
        "bam",
        "--seed",
        "2",
        "--lr",
        "1e30",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("diverged"));

    // The checkpoint rolls back to the last finite parameters: here the
    // seeded initialization, since the very first update explodes.
    let loaded: PolicyNetwork<f32> = checkpoint::load(&out_dir.join("checkpoint.bin")).unwrap();
    let saved: RunConfig =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let expected = PolicyNetwork::<f32>::init(saved.architecture, &mut rng).unwrap();
    assert_eq!(
        flatten(&expected),
        flatten(&loaded),
        "rolled-back checkpoint differs from last good state"
    );
}
