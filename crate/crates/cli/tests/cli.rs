use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "synth_train=512",
    "--set",
    "synth_test=256",
    "--set",
    "epochs=2",
];

fn fbk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbk"))
        .args(args)
        .env_remove("FBK_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn default_gradcheck_grid_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbk(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["passed"], true);
    assert_eq!(r["result"]["cases"].as_array().unwrap().len(), 24);
    assert!(r["result"]["max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn gradcheck_k0_grid_passes() {
    assert_eq!(code(&fbk(&["gradcheck", "--set", "gradcheck_ks=[0]"])), 0);
}

#[test]
fn corrupted_gradient_exits_1_with_offender() {
    let out = fbk(&[
        "gradcheck",
        "--set",
        "gradcheck_ks=[1]",
        "--set",
        "corrupt_gradient=true",
    ]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("worst offender") && stderr.contains("weight[0]"),
        "{stderr}"
    );
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&fbk(&["gradcheck", "--no-such-flag"])), 2);
    assert_eq!(code(&fbk(&["frobnicate"])), 2);
    assert_eq!(code(&fbk(&["ablate", "q-sweep"])), 2);
    assert_eq!(code(&fbk(&["gradcheck", "--set", "no_such_key=1"])), 2);
    assert_eq!(code(&fbk(&["gradcheck", "--set", "p=1.5"])), 2);
    assert_eq!(code(&fbk(&["train", "--set", "dataset=cifar10"])), 2);
}

#[test]
fn io_errors_exit_3() {
    assert_eq!(code(&fbk(&["gradcheck", "--config", "/nonexistent/fbk.toml"])), 3);
    assert_eq!(code(&fbk(&["eval", "--checkpoint", "/nonexistent"])), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_fbk"))
        .args(["train", "--set", "dataset=cifar10"])
        .env("FBK_DATA_DIR", "/nonexistent")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn config_file_and_seed_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "gradcheck_ks = [0]\nseed = 3\n").unwrap();
    let out_dir = dir.path().join("out");
    let args = [
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    assert_eq!(code(&fbk(&args)), 0);
    let r = report(&out_dir);
    assert_eq!(r["seed"], 9);
    assert_eq!(r["config"]["gradcheck_ks"], serde_json::json!([0]));
    assert_eq!(r["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn identical_invocations_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let args = with(
            &["train"],
            &with(SMALL, &["--threads", "2", "--out", d.path().to_str().unwrap()]),
        );
        assert_eq!(code(&fbk(&args)), 0);
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(report(a.path())["input_hash"], report(a.path())["result"]["data_hash"]);
}

#[test]
fn train_writes_metrics_and_eval_reads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&fbk(&with(&["train"], &with(SMALL, &["--out", d])))), 0);
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let final_err = report(dir.path())["result"]["summary"]["final_test_err"]
        .as_f64()
        .unwrap();
    assert!(dir.path().join("checkpoints/latest.fbkt").exists());

    assert_eq!(code(&fbk(&with(&["eval"], &with(SMALL, &["--out", d])))), 0);
    let r = report(dir.path());
    assert_eq!(r["result"]["test_err"].as_f64().unwrap(), final_err);
    assert_eq!(r["result"]["epochs_completed"], 2);

    // A different architecture must not load this checkpoint.
    assert_eq!(
        code(&fbk(&with(&["eval"], &with(SMALL, &["--out", d, "--set", "k=7"])))),
        2
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let args = |d: &tempfile::TempDir, extra: &[&'static str]| {
        let mut v = vec!["train".to_string()];
        v.extend(SMALL.iter().map(|s| s.to_string()));
        v.extend(["--set", "p=0.5", "--threads", "1", "--out"].map(String::from));
        v.push(d.path().to_str().unwrap().to_string());
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |v: Vec<String>| code(&fbk(&v.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(run(args(&full, &[])), 0);
    assert_eq!(run(args(&split, &["--set", "epochs=1"])), 0);
    assert_eq!(run(args(&split, &["--resume"])), 0);

    let trajectory = |d: &tempfile::TempDir| -> Vec<(Value, Value, Value)> {
        std::fs::read_to_string(d.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["train_loss"].clone(), v["train_err"].clone(), v["test_err"].clone())
            })
            .collect()
    };
    assert_eq!(trajectory(&full).len(), 2);
    assert_eq!(trajectory(&full), trajectory(&split));
    assert_eq!(report(split.path())["result"]["resumed_at_epoch"], 1);
}

#[test]
fn untrained_eval_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbk(&[
        "eval",
        "--untrained",
        "--set",
        "synth_test=4000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let r = &report(dir.path())["result"];
    let (err, chance) = (r["test_err"].as_f64().unwrap(), r["chance_err"].as_f64().unwrap());
    assert!((err - chance).abs() <= 0.03, "{err} vs {chance}");
}

#[test]
fn ablation_table_has_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "ablate",
        "k-sweep",
        "--set",
        "synth_train=128",
        "--set",
        "synth_test=64",
        "--set",
        "epochs=1",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    let out = fbk(&args);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("k-sweep"), "{stdout}");
    let r = report(dir.path());
    let settings: Vec<&str> = r["result"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|row| row["setting"].as_str().unwrap())
        .collect();
    assert_eq!(settings, ["10", "20", "50", "80"]);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn oracle_compare_passes() {
    let out = fbk(&["oracle-compare", "--set", "mc_masks=5000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}
