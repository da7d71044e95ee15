use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amtfnet::metrics::ConfusionMatrix;
use amtfnet::model::{count_parameters, ModelConfig, Variant};
use serde_json::{json, Value};

fn amtfnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amtfnet"))
        .args(args)
        .current_dir(dir)
        .env("AMTFNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_json(path: &Path, value: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Two modes, two loops (v = 4), two faults (L = 3).
fn small_generator() -> Value {
    json!({
        "modes": [
            {"setpoints": [1.0, -0.5], "gain": 1.0},
            {"setpoints": [2.0, 1.0], "gain": 1.4}
        ],
        "faults": [
            {"kind": "step", "group": 0, "magnitude": 2.0},
            {"kind": "sticking", "group": 1, "magnitude": 0.0}
        ],
        "segment_len": 160,
        "noise_std": 0.05,
        "onset": 20,
        "burn_in": 100
    })
}

fn small_model() -> Value {
    json!({"w": 16, "hidden": 8, "kernel_sizes": [3, 5]})
}

/// Generated data in `dir/data` and a training config at `dir/train.json`.
fn setup(dir: &Path, epochs: usize) -> PathBuf {
    write_json(&dir.join("gen.json"), &json!({"seed": 3, "generator": small_generator()}));
    let out = amtfnet(&["generate", "--config", "gen.json", "--out", "data"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = dir.join("train.json");
    write_json(
        &config,
        &json!({
            "seed": 3,
            "model": small_model(),
            "train": {"epochs": epochs, "batch_size": 64},
            "data": {"manifest": "data/manifest.json"}
        }),
    );
    config
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn generate_writes_one_file_per_run_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = small_generator();
    gen["modes"].as_array_mut().unwrap().push(json!({"setpoints": [-1.0, 0.5], "gain": 0.8}));
    gen["faults"].as_array_mut().unwrap().extend([
        json!({"kind": "random", "group": 0, "magnitude": 0.5}),
        json!({"kind": "drift", "group": 1, "magnitude": 0.004}),
    ]);
    write_json(&dir.path().join("gen.json"), &json!({"generator": gen}));
    for (out_dir, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let out = amtfnet(&["generate", "--config", "gen.json", "--out", out_dir, "--seed", seed], dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = csv_files(&dir.path().join("a"));
    assert_eq!(a.len(), 15);
    assert!(a.contains(&"run_m2_c4.csv".to_string()));

    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    for f in &a {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "run_m0_c0.csv"), read("c", "run_m0_c0.csv"));

    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["num_classes"], 5);
    assert_eq!(manifest["generator_seed"], 9);
    let labels: Vec<u64> = manifest["classes"].as_array().unwrap().iter().map(|c| c["label"].as_u64().unwrap()).collect();
    assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 15);
}

#[test]
fn generator_seed_in_config_wins_over_run_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = small_generator();
    gen["seed"] = json!(42);
    write_json(&dir.path().join("gen.json"), &json!({"seed": 1, "generator": gen}));
    for (out_dir, seed) in [("a", "1"), ("b", "2")] {
        assert_eq!(code(&amtfnet(&["generate", "--config", "gen.json", "--out", out_dir, "--seed", seed], dir.path())), 0);
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("run_m1_c2.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read_json(&dir.path().join("b/manifest.json"))["generator_seed"], 42);
}

#[test]
fn train_writes_artifacts_deterministically_and_eval_scores_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 30);
    for out_dir in ["run1", "run2"] {
        let out = amtfnet(&["train", "--config", "train.json", "--out", out_dir], d);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        for artifact in ["checkpoint.bin", "train_report.json", "resolved_config.json"] {
            assert!(d.join(out_dir).join(artifact).is_file(), "{out_dir}/{artifact}");
        }
    }
    assert_eq!(std::fs::read(d.join("run1/checkpoint.bin")).unwrap(), std::fs::read(d.join("run2/checkpoint.bin")).unwrap());

    let report = read_json(&d.join("run1/train_report.json"));
    assert_eq!(report["train"]["epochs"].as_array().unwrap().len(), 30);
    assert_eq!(report["model"]["v"], 4);
    assert_eq!(report["model"]["num_classes"], 3);

    // the snapshot is itself a runnable config
    let out = amtfnet(&["train", "--config", "run1/resolved_config.json", "--out", "run3"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(d.join("run1/checkpoint.bin")).unwrap(), std::fs::read(d.join("run3/checkpoint.bin")).unwrap());

    let out = amtfnet(
        &["eval", "--checkpoint", "run1/checkpoint.bin", "--config", "train.json", "--out", "ev", "--export-features", "feat.csv"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval = read_json(&d.join("ev/eval_report.json"));
    for key in ["micro_f1", "macro_f1", "avg_fdr", "avg_fpr"] {
        let x = eval[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }
    // the test split evaluated here is the one scored at the end of training
    assert_eq!(eval["micro_f1"], report["test"]["micro_f1"]);

    let counts: Vec<Vec<u64>> = serde_json::from_value(eval["confusion"]["counts"].clone()).unwrap();
    let cm = ConfusionMatrix::from_counts(counts).unwrap();
    assert_eq!(cm.micro_f1(), eval["micro_f1"].as_f64().unwrap());
    assert_eq!(cm.macro_f1(), eval["macro_f1"].as_f64().unwrap());
    let avg_fdr = (0..3).map(|l| cm.fdr(l)).sum::<f64>() / 3.0;
    assert_eq!(avg_fdr, eval["avg_fdr"].as_f64().unwrap());
    assert_eq!(cm.total(), eval["samples"].as_u64().unwrap());

    let classes = std::fs::read_to_string(d.join("ev/eval_classes.csv")).unwrap();
    assert_eq!(classes.lines().count(), 1 + 3);
    let features = std::fs::read_to_string(d.join("feat.csv")).unwrap();
    assert_eq!(features.lines().count() as u64, 1 + cm.total());
    assert!(features.lines().next().unwrap().ends_with("f7,label,mode"));
}

#[test]
fn eval_rejects_data_of_the_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 1);
    assert_eq!(code(&amtfnet(&["train", "--config", "train.json", "--out", "run"], d)), 0);
    let text = std::fs::read_to_string(d.join("data/run_m0_c1.csv")).unwrap();
    let narrow: String = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{},{}\n", f[0], f[1], f[4], f[5])
        })
        .collect();
    std::fs::write(d.join("narrow.csv"), narrow).unwrap();
    let out = amtfnet(&["eval", "--checkpoint", "run/checkpoint.bin", "--data", "narrow.csv", "--out", "ev"], d);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("v = 4"), "{}", stderr(&out));

    let out = amtfnet(&["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data/run_m1_c2.csv", "--out", "ev"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn missing_label_column_is_an_input_error_naming_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.csv"), "a,b,mode\n1,2,0\n3,4,0\n").unwrap();
    write_json(&d.join("train.json"), &json!({"data": {"files": ["run.csv"], "num_classes": 2}}));
    let out = amtfnet(&["train", "--config", "train.json", "--out", "run"], d);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("\"label\""), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases = [
        ("typo", json!({"seed": 1, "epochs": 3})),
        ("nested typo", json!({"train": {"epoch": 3}, "generator": small_generator()})),
        ("bad split", json!({"split": {"train_frac": 0.9, "val_frac": 0.2, "test_frac": 0.1}, "generator": small_generator()})),
        ("no source", json!({"model": small_model()})),
        ("files without classes", json!({"data": {"files": ["x.csv"]}})),
    ];
    for (name, config) in cases {
        write_json(&d.join("c.json"), &config);
        let out = amtfnet(&["train", "--config", "c.json", "--out", "o"], d);
        assert_eq!(code(&out), 2, "{name}: {}", stderr(&out));
    }
    write_json(&d.join("c.json"), &json!({"generator": small_generator()}));
    let out = amtfnet(&["generate", "--config", "c.json"], d);
    assert_eq!(code(&out), 2, "missing out dir");
    assert!(stderr(&out).contains("--out"));

    std::fs::write(d.join("file"), "").unwrap();
    let out = amtfnet(&["generate", "--config", "c.json", "--out", "file/sub"], d);
    assert_eq!(code(&out), 2, "unwritable out dir");

    let out = amtfnet(&["train", "--config", "missing.json", "--out", "o"], d);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(
        &d.join("c.json"),
        &json!({
            "model": small_model(),
            "train": {"epochs": 3, "batch_size": 64, "initial_lr": 1e300, "optimizer": "sgd_momentum"},
            "generator": small_generator()
        }),
    );
    let out = amtfnet(&["train", "--config", "c.json", "--out", "o"], d);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_for_any_seed_and_catches_a_broken_backward_rule() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["0", "5", "123"] {
        let out = amtfnet(&["gradcheck", "--seed", seed], dir.path());
        assert_eq!(code(&out), 0, "seed {seed}: {}", String::from_utf8_lossy(&out.stdout));
    }
    let out = amtfnet(&["gradcheck", "--out", "gc"], dir.path());
    let rows = read_json(&dir.path().join("gc/gradcheck.json"));
    let rows = rows.as_array().unwrap();
    assert!(rows.iter().any(|r| r["name"] == "end_to_end_FULL"));
    assert!(rows.iter().all(|r| r["passed"] == true));
    assert_eq!(code(&out), 0);

    let out = amtfnet(&["gradcheck", "--inject-fault"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("corrupted_sigmoid"));
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 2);
    let out = amtfnet(&["ablate", "--config", "train.json", "--out", "abl"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("variant,micro_f1,macro_f1,parameters"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["A1", "A2", "A3", "A4", "A5", "A6", "FULL"]);
    for r in &rows {
        for score in &r[1..3] {
            let x: f64 = score.parse().unwrap();
            assert!((0.0..=1.0).contains(&x), "{r:?}");
        }
    }
    let mut full = ModelConfig::new(4, 3).with_variant(Variant::Full);
    full.w = 16;
    full.hidden = 8;
    full.kernel_sizes = vec![3, 5];
    assert_eq!(rows[6][3], count_parameters(&full).to_string());
}
