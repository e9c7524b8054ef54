use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platesam"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Eight synthetic images (six train, two test) plus a two-step stage-1 adapter.
fn fixture(dir: &Path) {
    ok(
        dir,
        &[
            "synth-data",
            "--n",
            "8",
            "--seed",
            "0",
            "--test-fraction",
            "0.25",
            "--out",
            "data",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--stage",
            "1",
            "--data",
            "data",
            "--max-steps",
            "2",
            "--out",
            "s1",
        ],
    );
}

#[test]
fn synth_data_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--n", "16", "--seed", "0", "--out", "a"]);
    ok(d, &["synth-data", "--n", "16", "--seed", "0", "--out", "b"]);
    let ann = json(d.join("a/annotations.json"));
    let images = ann["images"].as_array().unwrap();
    assert_eq!(images.len(), 16);
    for entry in images {
        let file = entry["file"].as_str().unwrap();
        let a = std::fs::read(d.join("a").join(file)).unwrap();
        let b = std::fs::read(d.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
    assert_eq!(
        std::fs::read(d.join("a/annotations.json")).unwrap(),
        std::fs::read(d.join("b/annotations.json")).unwrap()
    );
}

#[test]
fn plates_flag_fixes_box_count() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["synth-data", "--n", "6", "--plates", "1", "--out", "d"],
    );
    let ann = json(tmp.path().join("d/annotations.json"));
    for entry in ann["images"].as_array().unwrap() {
        assert_eq!(entry["boxes"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn stage_two_requires_init() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--n", "4", "--out", "data"]);
    let out = run(
        d,
        &["train", "--stage", "2", "--data", "data", "--out", "s2"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn stage_one_writes_small_checkpoint_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--n", "8", "--out", "data"]);
    ok(
        d,
        &[
            "train", "--stage", "1", "--data", "data", "--epochs", "1", "--out", "s1",
        ],
    );
    let size = std::fs::metadata(d.join("s1/adapter.safetensors"))
        .unwrap()
        .len();
    assert!(size < 1_000_000, "checkpoint is {size} bytes");
    let cfg = json(d.join("s1/resolved_config.json"));
    assert_eq!(cfg["train"]["epochs_stage1"], 1);
    assert_eq!(cfg["model"]["image_size"], 256);
    let csv = std::fs::read_to_string(d.join("s1/loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,mean_loss,lr\n"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--n", "4", "--out", "data"]);
    std::fs::write(
        d.join("run.json"),
        r#"{"train": {"epochs_stage1": 3, "base_lr": 0.001}, "injection": {"rank": 2}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "train", "--config", "run.json", "--stage", "1", "--data", "data", "--epochs", "1",
            "--out", "s1",
        ],
    );
    let cfg = json(d.join("s1/resolved_config.json"));
    assert_eq!(cfg["train"]["epochs_stage1"], 1);
    assert_eq!(cfg["train"]["base_lr"], 0.001);
    assert_eq!(cfg["injection"]["rank"], 2);
    assert_eq!(cfg["train"]["batch_size"], 2);
}

#[test]
fn malformed_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), "{").unwrap();
    let out = run(
        tmp.path(),
        &["synth-data", "--config", "bad.json", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--n", "2", "--out", "data"]);
    std::fs::write(d.join("junk.safetensors"), b"not a checkpoint").unwrap();
    let out = run(
        d,
        &[
            "export-merged",
            "--adapter",
            "junk.safetensors",
            "--out",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_records_refinement_and_export_matches_adapter() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--adapter",
            "s1/adapter.safetensors",
            "--refine",
            "0",
            "--out",
            "e0",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--adapter",
            "s1/adapter.safetensors",
            "--refine",
            "1",
            "--out",
            "e1",
        ],
    );
    assert_eq!(json(d.join("e0/report.json"))["refine_iters"], 0);
    assert_eq!(json(d.join("e1/report.json"))["refine_iters"], 1);
    assert!(d.join("e1/pr_curve.csv").exists());

    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--adapter",
            "s1/adapter.safetensors",
            "--out",
            "ea",
        ],
    );
    ok(
        d,
        &[
            "export-merged",
            "--adapter",
            "s1/adapter.safetensors",
            "--out",
            "m",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--base",
            "m/merged.safetensors",
            "--out",
            "em",
        ],
    );
    assert_eq!(
        json(d.join("ea/report.json")),
        json(d.join("em/report.json"))
    );
    // identical boxes; scores agree to float rounding
    let lines = |p: &str| -> Vec<Value> {
        std::fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (a, m) = (lines("ea/detections.jsonl"), lines("em/detections.jsonl"));
    assert_eq!(a.len(), m.len());
    for (x, y) in a.iter().zip(&m) {
        let boxes = |v: &Value| -> Vec<Value> {
            v["detections"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d["box"].clone())
                .collect()
        };
        assert_eq!(boxes(x), boxes(y));
        let (sx, sy) = (x["score"].as_f64().unwrap(), y["score"].as_f64().unwrap());
        assert!((sx - sy).abs() <= 1e-5 * sx.abs().max(1.0), "{sx} vs {sy}");
    }
}

#[test]
fn infer_writes_one_mask_and_line_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(
        d,
        &[
            "infer",
            "--adapter",
            "s1/adapter.safetensors",
            "--input",
            "data/images",
            "--out",
            "inf",
        ],
    );
    let lines = std::fs::read_to_string(d.join("inf/predictions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    let masks = std::fs::read_dir(d.join("inf/masks")).unwrap().count();
    assert_eq!(masks, 8);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    let mask = image::open(d.join("inf").join(first["mask"].as_str().unwrap())).unwrap();
    assert_eq!((mask.width(), mask.height()), (320, 240));
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn ablate_rank_and_injection() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth-data",
            "--n",
            "4",
            "--test-fraction",
            "0.5",
            "--out",
            "data",
        ],
    );
    let common = ["--data", "data", "--max-steps", "1"];

    let mut args = vec!["ablate", "--axis", "rank", "--out", "r"];
    args.extend(common);
    ok(d, &args);
    let rows = csv_rows(d.join("r/ablation.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(),
        ["1", "2", "4", "8"]
    );

    let mut args = vec!["ablate", "--axis", "injection", "--out", "i"];
    args.extend(common);
    ok(d, &args);
    let rows = csv_rows(d.join("i/ablation.csv"));
    assert_eq!(rows.len(), 3);
    // tiny preset, r = 4: encoder blocks see 64 -> 64, decoder self-attention
    // 64 -> 64, cross-attentions 64 -> 32, each with q and v wrapped
    let r = 4;
    let enc = 2 * 2 * r * (64 + 64);
    let dec = 2 * (2 * r * (64 + 64) + 2 * 2 * r * (64 + 32)) + 2 * r * (64 + 32);
    let counts: Vec<usize> = rows.iter().map(|row| row[2].parse().unwrap()).collect();
    assert_eq!(counts, [enc, dec, enc + dec]);
}

#[test]
fn ablate_refine_has_five_rows_and_unknown_axis_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth-data",
            "--n",
            "4",
            "--test-fraction",
            "0.5",
            "--out",
            "data",
        ],
    );
    ok(
        d,
        &[
            "ablate",
            "--axis",
            "refine",
            "--data",
            "data",
            "--max-steps",
            "1",
            "--out",
            "f",
        ],
    );
    assert_eq!(csv_rows(d.join("f/ablation.csv")).len(), 5);
    let out = run(
        d,
        &["ablate", "--axis", "width", "--data", "data", "--out", "w"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        d,
        &[
            "ablate", "--axis", "rank", "--values", "0", "--data", "data", "--out", "w",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}
