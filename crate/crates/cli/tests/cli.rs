use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdp_cli::RunConfig;
use kdp_pipeline::train::{read_report, TrainConfig};

const MICRO: &str = r#"
seed = 5

[[scenarios]]
kind = "in_ramp"

[[scenarios]]
kind = "intersection"
random_variant = true

[[scenarios]]
kind = "roundabout"
random_variant = true

[demos]
episodes = 2

[train]
preset = "micro"
batch_size = 16
horizon = 4
steps = 50
checkpoint_every = 10
lr = 0.001
warmup_steps = 5

[train.schedule]
steps = 8

[eval]
episodes = 2
max_steps = 25
"#;

fn kdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdp"))
        .args(args)
        .env_remove("KDP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kdp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the micro config and demos into a fresh run directory.
fn micro_run(root: &Path, name: &str) -> (PathBuf, PathBuf) {
    let out = root.join(name);
    let cfg = root.join(format!("{name}.toml"));
    std::fs::write(&cfg, MICRO).unwrap();
    ok(&["gen-demos", "--config", s(&cfg), "--out", s(&out)]);
    (out, cfg)
}

fn stats_hash(stdout: &str) -> String {
    stdout
        .split_whitespace()
        .skip_while(|w| *w != "stats_hash")
        .nth(1)
        .expect("hash printed")
        .to_string()
}

#[test]
fn demo_generation_is_deterministic_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name).join("nested");
        let stdout = ok(&[
            "gen-demos",
            "--scenario",
            "in_ramp",
            "--episodes",
            "2",
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        assert!(out.join("demos.kdpd").exists());
        assert!(out.join("config.snapshot").exists());
        (stats_hash(&stdout), std::fs::read(out.join("demos.kdpd")).unwrap())
    };
    let (h1, b1) = run("a");
    let (h2, b2) = run("b");
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
    assert_eq!(h1.len(), 64);
}

#[test]
fn zero_episodes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdp(&["gen-demos", "--episodes", "0", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_keys_are_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n\n[train]\nlearning_rate = 0.1\n").unwrap();
    let out = kdp(&["gen-demos", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "orig");
    let snapshot = out.join("config.snapshot");
    let again = dir.path().join("again");
    ok(&["gen-demos", "--config", s(&snapshot), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(out.join("demos.kdpd")).unwrap(),
        std::fs::read(again.join("demos.kdpd")).unwrap()
    );
    let snap = RunConfig::load(&snapshot).unwrap();
    assert_eq!(snap.seed, Some(5));
    assert_eq!(snap.train.seed, 5);
    assert_eq!(snap.demos.episodes, 2);
}

#[test]
fn seed_falls_back_to_environment_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["gen-demos", "--scenario", "in_ramp", "-n", "1", "--out", s(out)];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_kdp"))
            .args(&args)
            .env("KDP_SEED", "41")
            .output()
            .unwrap();
        assert!(o.status.success());
        RunConfig::load(&out.join("config.snapshot")).unwrap().seed
    };
    assert_eq!(run(&dir.path().join("env"), &[]), Some(41));
    assert_eq!(run(&dir.path().join("flag"), &["--seed", "3"]), Some(3));
}

#[test]
fn training_writes_one_report_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    ok(&["train", "--out", s(&out)]);
    let rows = read_report(&std::fs::read_to_string(out.join("train_report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows.last().unwrap().step, 50);
    assert!(out.join("checkpoints/last.kdpc").exists());
}

#[test]
fn resumed_training_continues_the_report_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (full, _) = micro_run(dir.path(), "full");
    ok(&["train", "--out", s(&full)]);
    let (split, _) = micro_run(dir.path(), "split");
    ok(&["train", "--out", s(&split), "--steps", "30"]);
    let ckpt = split.join("checkpoints/last.kdpc");
    ok(&["train", "--out", s(&split), "--steps", "50", "--resume", s(&ckpt)]);
    let a = std::fs::read_to_string(full.join("train_report.csv")).unwrap();
    let b = std::fs::read_to_string(split.join("train_report.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(full.join("checkpoints/last.kdpc")).unwrap(),
        std::fs::read(&ckpt).unwrap()
    );
}

#[test]
fn resuming_with_a_different_preset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    ok(&["train", "--out", s(&out), "--steps", "10"]);
    let ckpt = out.join("checkpoints/last.kdpc");
    let o = kdp(&[
        "train",
        "--out",
        s(&out),
        "--steps",
        "20",
        "--resume",
        s(&ckpt),
        "--preset",
        "small",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_with_numeric_failure_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    let o = kdp(&["train", "--out", s(&out), "--lr", "1e200", "--steps", "20"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("diagnostic.kdpc"), "{err}");
    assert!(out.join("checkpoints/diagnostic.kdpc").exists());
}

#[test]
fn evaluation_is_reproducible_and_covers_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    ok(&["train", "--out", s(&out), "--steps", "10"]);
    let files = ["metrics.csv", "activations_temporal.csv", "activations_scenario.csv"];
    let read = || files.map(|f| std::fs::read(out.join(f)).unwrap());
    ok(&["eval", "--out", s(&out), "--seed", "1"]);
    let first = read();
    ok(&["eval", "--out", s(&out), "--seed", "1"]);
    assert_eq!(first, read());
    let metrics = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("aggregate,")).count(), 3);
    assert_eq!(metrics.lines().filter(|l| l.starts_with("episode,")).count(), 6);
    for k in ["in_ramp", "intersection", "roundabout"] {
        assert!(out.join(format!("traces/{k}.jsonl")).exists());
    }

    let temporal = std::fs::read(out.join("activations_temporal.csv")).unwrap();
    std::fs::remove_file(out.join("activations_temporal.csv")).unwrap();
    ok(&["analyze", "--out", s(&out)]);
    assert_eq!(std::fs::read(out.join("activations_temporal.csv")).unwrap(), temporal);
}

#[test]
fn scripted_baseline_runs_through_the_same_harness() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    let stdout = ok(&["eval", "--out", s(&out), "--policy", "scripted", "--scenario", "in_ramp", "-n", "3"]);
    assert!(stdout.contains("in_ramp: success"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("episode,in_ramp")).count(), 3);
}

#[test]
fn evaluation_rejects_foreign_statistics_naming_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = micro_run(dir.path(), "run");
    ok(&["train", "--out", s(&out), "--steps", "10"]);
    let other = dir.path().join("other.kdpd");
    let stdout = ok(&[
        "gen-demos",
        "--out",
        s(&dir.path().join("o")),
        "--scenario",
        "in_ramp",
        "-n",
        "1",
        "--seed",
        "99",
        "--dataset",
        s(&other),
    ]);
    let foreign = stats_hash(&stdout);
    let o = kdp(&["eval", "--out", s(&out), "--dataset", s(&other)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    let own = kdp_pipeline::DemoDataset::load(&out.join("demos.kdpd")).unwrap().stats.hash();
    assert!(err.contains(&foreign) && err.contains(&own), "{err}");
}

#[test]
fn latency_reports_every_requested_preset() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "latency",
        "--out",
        s(dir.path()),
        "--presets",
        "micro,small",
        "--trials",
        "2",
        "--diffusion-steps",
        "3",
    ]);
    let csv = std::fs::read_to_string(dir.path().join("latency.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], kdp_pipeline::rollout::LATENCY_HEADER);
    assert!(lines[1].starts_with("micro,") && lines[2].starts_with("small,"));
}

#[test]
fn help_lists_training_defaults() {
    let help = ok(&["train", "--help"]);
    let d = TrainConfig::default();
    for (flag, value) in [
        ("--steps", d.steps.to_string()),
        ("--batch-size", d.batch_size.to_string()),
        ("--horizon", d.horizon.to_string()),
        ("--diffusion-steps", d.schedule.steps.to_string()),
        ("--n-experts", d.n_experts.to_string()),
        ("--top-k", d.top_k.to_string()),
        ("--lr", d.lr.to_string()),
        ("--lambda-bal", d.lambda_bal.to_string()),
        ("--gamma-mi", d.gamma_mi.to_string()),
        ("--p-drop", d.p_drop.to_string()),
        ("--checkpoint-every", d.checkpoint_every.to_string()),
        ("--preset", d.preset.to_string()),
    ] {
        let line = help.lines().skip_while(|l| !l.contains(flag)).take(3).collect::<String>();
        assert!(line.contains(&format!("[default: {value}]")), "{flag}: {line}");
    }
    for cmd in ["gen-demos", "eval", "analyze", "latency"] {
        assert!(ok(&[cmd, "--help"]).contains("--out"));
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::from_toml_str(MICRO).unwrap();
    cfg.validate().unwrap();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(
        RunConfig::from_toml_str(&RunConfig::default().to_toml()).unwrap(),
        RunConfig::default()
    );
}
