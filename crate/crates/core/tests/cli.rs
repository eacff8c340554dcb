//! End-to-end checks of the command-line surface: reproducible generation,
//! train/eval round trips, error exits, and the bench table shape.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridplan"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gridplan_cli_{}_{}", name, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "train": {"epochs": 2, "batch_size": 10, "sgd": {"lr": 1.0, "decay": 0.9}, "chunk_size": 5},
  "spt": {"d": 16, "n_layers": 2, "heads": 2, "d_fc": 64}
}"#,
    )
    .unwrap();
    path
}

fn gen_dataset(dir: &Path, task: &str, size: usize) {
    let status = bin()
        .args([
            "gen",
            "--task",
            task,
            "--size",
            &size.to_string(),
            "--count",
            "30,10,10",
            "--obstacles",
            "0:3",
            "--seed",
            "5",
            "--workspace",
            "40",
            "--out",
            dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn gen_is_reproducible_and_validates_flags() {
    let root = tmp("gen");
    let a = root.join("a");
    let b = root.join("b");
    gen_dataset(&a, "nav", 8);
    gen_dataset(&b, "nav", 8);
    for split in ["train", "val", "test"] {
        for file in ["maps.bin", "goals.bin", "distances.bin", "manifest.json"] {
            let fa = fs::read(a.join(split).join(file)).unwrap();
            let fb = fs::read(b.join(split).join(file)).unwrap();
            assert_eq!(fa, fb, "{split}/{file} differs between identical gen runs");
        }
    }

    // Invalid obstacle range exits nonzero with a message.
    let out = bin()
        .args([
            "gen", "--task", "nav", "--size", "8", "--count", "5,2,2", "--obstacles", "9-1",
            "--seed", "0", "--out", root.join("bad").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    fs::remove_dir_all(&root).ok();
}

#[test]
fn train_eval_roundtrip_with_attention_export() {
    let root = tmp("roundtrip");
    let data = root.join("data");
    gen_dataset(&data, "nav", 8);
    let config = write_tiny_config(&root);
    let ckpt = root.join("model.ckpt");

    let out = bin()
        .args([
            "train",
            "--model",
            "spt",
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = root.join("model.ckpt.metrics.jsonl");
    let log_text = fs::read_to_string(&log).unwrap();
    // Line-delimited JSON with the promised fields.
    let first: serde_json::Value = serde_json::from_str(log_text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "split", "loss", "action_acc", "lr", "wall_ms"] {
        assert!(first.get(key).is_some(), "metrics line missing {key}");
    }

    let report = root.join("report.json");
    let run_eval = || {
        let out = bin()
            .args([
                "eval",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--dataset",
                data.to_str().unwrap(),
                "--report",
                report.to_str().unwrap(),
                "--attn",
                "1,0",
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
        let parsed: serde_json::Value =
            serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        parsed["action_acc"].as_f64().expect("report carries action_acc")
    };
    let first_acc = run_eval();
    let second_acc = run_eval();
    assert_eq!(first_acc, second_acc, "evaluating twice must be identical");
    assert!(report.with_extension("attn_1_0.csv").exists());
    assert!(report.with_extension("curve.csv").exists());

    fs::remove_dir_all(&root).ok();
}

#[test]
fn train_rejects_missing_dataset() {
    let root = tmp("missing");
    let out = bin()
        .args([
            "train",
            "--model",
            "spt",
            "--dataset",
            root.join("nope").to_str().unwrap(),
            "--out",
            root.join("m.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not found"), "unexpected stderr: {stderr}");
    fs::remove_dir_all(&root).ok();
}

#[test]
fn bench_emits_requested_cells() {
    let root = tmp("bench");
    let out_json = root.join("bench.json");
    let out = bin()
        .args([
            "bench",
            "--sizes",
            "8,12",
            "--count",
            "40",
            "--methods",
            "dijkstra,astar",
            "--out",
            out_json.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "bench failed: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&out_json).unwrap()).unwrap();
    let cells = parsed["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4); // 2 methods x 2 sizes
    assert!(cells.iter().all(|c| c["maps"] == 40));
    assert!(out_json.with_extension("csv").exists());
    fs::remove_dir_all(&root).ok();
}

#[test]
fn e2e_train_keeps_planner_frozen() {
    let root = tmp("e2e");
    let data = root.join("manip");
    gen_dataset(&data, "manip", 8);
    let config = write_tiny_config(&root);

    // Pretrain a tiny planner on the same data.
    let planner = root.join("planner.ckpt");
    let out = bin()
        .args([
            "train",
            "--model",
            "spt",
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            planner.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let planner_bytes = fs::read(&planner).unwrap();

    let e2e_ckpt = root.join("e2e.ckpt");
    let out = bin()
        .args([
            "e2e-train",
            "--planner",
            planner.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--supervision",
            "sparse",
            "--out",
            e2e_ckpt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Input planner checkpoint untouched.
    assert_eq!(planner_bytes, fs::read(&planner).unwrap());
    // Per-epoch rows carry both accuracies.
    let log = fs::read_to_string(root.join("e2e.ckpt.metrics.jsonl")).unwrap();
    let val_row = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["split"] == "val")
        .expect("validation rows present");
    assert!(val_row.get("action_acc").is_some());
    assert!(val_row.get("map_acc").is_some());

    // The bundled checkpoint evaluates with both metrics.
    let report = root.join("e2e_report.json");
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            e2e_ckpt.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(parsed["action_acc"].is_number());
    assert!(parsed["map_acc"].is_number());

    fs::remove_dir_all(&root).ok();
}
