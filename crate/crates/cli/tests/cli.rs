use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn snad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snad")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = snad(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&[
        "synth", "--out-dir", s(dir), "--n-train", "8", "--n-test", "8", "--grid", "6", "6", "--channels", "8", "--seed", "3",
    ]);
}

fn small_model(dir: &Path) {
    ok(&[
        "train",
        "--manifest",
        s(&dir.join("manifest.json")),
        "--out",
        s(&dir.join("m.snck")),
        "--epochs",
        "2",
        "--quiet",
    ]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(snad(&["bench", "--shape", "4", "4", "8", "--iters", "0"]).status.code(), Some(2));
    assert_eq!(snad(&["train", "--manifest", "x", "--out", "y", "--adaptor", "deep"]).status.code(), Some(2));
    assert_eq!(snad(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = snad(&[
        "train",
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--out",
        s(&dir.path().join("m.snck")),
        "--levels",
        "2,5",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(snad(&["train", "--manifest", s(&missing), "--out", "x.snck"]).status.code(), Some(3));
    let junk = dir.path().join("junk.snck");
    std::fs::write(&junk, b"SNCKgarbage").unwrap();
    assert_eq!(
        snad(&["infer", "--checkpoint", s(&junk), "--features", "f.snft", "--out-dir", s(dir.path())]).status.code(),
        Some(3)
    );
}

#[test]
fn gradcheck_failure_exits_4() {
    let good = ok(&["gradcheck", "--configs", "3"]);
    let report: Value = serde_json::from_slice(&good.stdout).unwrap();
    assert_eq!(report["configs"].as_array().unwrap().len(), 3);
    assert_eq!(snad(&["gradcheck", "--configs", "3", "--corrupt-gradient"]).status.code(), Some(4));
}

#[test]
fn eval_csv_has_a_row_per_category_plus_average() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        small_dataset(d);
        small_model(d);
    }
    // drop the masks of the second category
    let mpath = b.path().join("manifest.json");
    let mut m: Value = serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
    for sample in m["samples"].as_array_mut().unwrap() {
        sample.as_object_mut().unwrap().remove("mask_path");
    }
    std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();

    let csv = a.path().join("metrics.csv");
    let json = a.path().join("metrics.json");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&a.path().join("m.snck")),
        "--manifest",
        s(&a.path().join("manifest.json")),
        "--checkpoint",
        s(&b.path().join("m.snck")),
        "--manifest",
        s(&mpath),
        "--out",
        s(&csv),
        "--json",
        s(&json),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("I-AUROC"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "category,n_test,i_auroc,p_auroc,f1_threshold,f1,f1_level");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[3].starts_with("average,16,"));
    let second: Vec<&str> = lines[2].split(',').collect();
    assert_eq!((second[3], second[6]), ("", "image"));
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[6], "pixel");
    assert!(!first[3].is_empty());

    let rows: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert!(rows[1]["p_auroc"].is_null());
}

#[test]
fn infer_writes_maps_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    small_model(dir.path());
    let out_dir = dir.path().join("maps");
    ok(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("m.snck")),
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--out-dir",
        s(&out_dir),
    ]);
    let scores = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "id,label,image_score");
    assert_eq!(lines.len(), 9);
    for ext in ["snam", "png", "json"] {
        assert!(out_dir.join(format!("test_0000.{ext}")).is_file(), "{ext}");
    }

    let single = dir.path().join("single");
    ok(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("m.snck")),
        "--features",
        s(&dir.path().join("features/test_0001.snft")),
        "--out-dir",
        s(&single),
        "--map-format",
        "gray",
    ]);
    let png = image_dims(&single.join("test_0001.png"));
    assert_eq!(png, (6, 6));
}

/// Width and height from a PNG IHDR chunk.
fn image_dims(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let w = u32::from_be_bytes(b[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(b[20..24].try_into().unwrap());
    (w, h)
}
