use std::fs;
use std::path::Path;
use std::process::Command;

use gazegrid::cli::{run, RunError};
use gazegrid::io::{load_map, save_map, GridFile};
use gazegrid::saliency::SaliencyMap;

fn cli(args: &[&str]) -> String {
    let mut full = vec!["gazegrid"];
    full.extend_from_slice(args);
    run(full).unwrap_or_else(|e| panic!("{args:?}: {e:?}"))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn small_dataset(dir: &Path) -> String {
    let out = dir.join("data");
    cli(&["gen", "--out", &s(&out), "--seed", "3", "--count", "24", "--val-count", "4", "--test-count", "8"]);
    s(&out.join("manifest.json"))
}

#[test]
fn gen_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let m = json(Path::new(&manifest));
    let records = m["records"].as_array().unwrap();
    assert_eq!(records.len(), 36);
    let splits: Vec<&str> = records.iter().map(|r| r["split"].as_str().unwrap()).collect();
    assert_eq!(splits.iter().filter(|s| **s == "train").count(), 24);
    assert_eq!(splits[24..28], ["val"; 4]);
    assert_eq!(splits[28..], ["test"; 8]);
    assert_eq!(m["feature_dims"], serde_json::json!([8, 12, 20]));
    let data = dir.path().join("data");
    assert!(data.join("features/frame_000000.ftn").exists());
    assert!(data.join("gt/frame_000035.smf").exists());
    assert!(data.join("detections.jsonl").exists());
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let gt_dir = dir.path().join("data/gt");
    let out = dir.path().join("self.json");
    let per_frame = dir.path().join("frames.csv");
    cli(&["eval", "--manifest", &manifest, "--pred-dir", &s(&gt_dir), "--out", &s(&out), "--per-frame", &s(&per_frame)]);
    let r = json(&out);
    assert!(r["kl"].as_f64().unwrap().abs() < 1e-12);
    assert!((r["cc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r["auc"].as_f64().unwrap(), 1.0);
    for key in ["precision", "recall", "f1", "accuracy", "tp", "fp", "tn", "fn", "threshold"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let csv = fs::read_to_string(per_frame).unwrap();
    assert!(csv.starts_with("frame_id,kl,cc,boxes,tp,fp,tn,fn\n"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn train_predict_eval_roc_and_info() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let model = dir.path().join("m.gzh");
    let history = dir.path().join("loss.csv");
    cli(&[
        "train", "--manifest", &manifest, "--out", &s(&model), "--grid", "4x4", "--epochs", "3", "--history",
        &s(&history),
    ]);
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 4);

    let info: serde_json::Value = serde_json::from_str(&cli(&["info", "--model", &s(&model)])).unwrap();
    assert_eq!(info["grid"], "4x4");
    assert_eq!(info["parameters"].as_u64().unwrap(), 8 * 16 + 16 + 16 * 6 * 10 * 16 + 16);

    let pred = dir.path().join("pred");
    cli(&["predict", "--manifest", &manifest, "--model", &s(&model), "--out", &s(&pred)]);
    let m = load_map(&pred.join("frame_000028.smf")).unwrap();
    assert_eq!((m.width(), m.height()), (512, 288));
    assert!((m.max() - 1.0).abs() < 1e-6);

    let roc = dir.path().join("roc.csv");
    let line = cli(&["roc", "--manifest", &manifest, "--pred-dir", &s(&pred), "--out", &s(&roc)]);
    let chosen: f64 = line.split_whitespace().next().unwrap().trim_start_matches("threshold=").parse().unwrap();
    assert!(fs::read_to_string(&roc).unwrap().starts_with("threshold,tpr,fpr\n"));

    let auto = dir.path().join("auto.json");
    cli(&["eval", "--manifest", &manifest, "--pred-dir", &s(&pred), "--auto-th", "--out", &s(&auto)]);
    assert_eq!(json(&auto)["threshold"].as_f64().unwrap(), chosen);
}

#[test]
fn sequential_and_parallel_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let a = dir.path().join("a.gzh");
    let b = dir.path().join("b.gzh");
    let common = ["--manifest", &manifest, "--grid", "4x4", "--epochs", "2"];
    let mut args = vec!["train", "--out"];
    let sa = s(&a);
    args.push(&sa);
    args.extend_from_slice(&common);
    cli(&args);
    let sb = s(&b);
    let mut args = vec!["--sequential", "train", "--out", &sb];
    args.extend_from_slice(&common);
    cli(&args);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn map_threshold_one_focuses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("m.smf");
    save_map(&map, &SaliencyMap::from_fn(8, 8, |x, y| (x + y) as f64 / 14.0).unwrap()).unwrap();
    let det = dir.path().join("d.jsonl");
    fs::write(
        &det,
        concat!(
            r#"{"frame_id":"f","class_id":0,"confidence":0.9,"x_min":0,"y_min":0,"x_max":2,"y_max":2}"#,
            "\n",
            r#"{"frame_id":"f","class_id":1,"confidence":0.8,"x_min":4,"y_min":4,"x_max":8,"y_max":8}"#,
            "\n",
        ),
    )
    .unwrap();
    let at = |th: &str| -> serde_json::Value {
        serde_json::from_str(&cli(&["map", "--map", &s(&map), "--detections", &s(&det), "--th", th])).unwrap()
    };
    let r = at("1.0");
    assert_eq!(r["focused_count"], 0);
    let r = at("0.5");
    assert_eq!(r["focused_count"], 1);
    assert_eq!(r["objects"][1]["focused"], true);
    assert_eq!(r["objects"][1]["focus_probability"], 1.0);
}

#[test]
fn encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("m.smf");
    save_map(
        &map,
        &SaliencyMap::from_fn(64, 64, |x, y| if (16..32).contains(&x) && (32..48).contains(&y) { 1.0 } else { 0.0 })
            .unwrap(),
    )
    .unwrap();
    let grid = dir.path().join("g.json");
    cli(&["encode", "--map", &s(&map), "--grid", "4x4", "--out", &s(&grid)]);
    let g: GridFile = serde_json::from_slice(&fs::read(&grid).unwrap()).unwrap();
    assert_eq!((g.rows, g.cols), (4, 4));
    let ones: Vec<usize> = g.values.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
    assert_eq!(ones, vec![9]);

    let back = dir.path().join("back.smf");
    cli(&["decode", "--grid-file", &s(&grid), "--width", "64", "--height", "64", "--normalize", "peak", "--out", &s(&back)]);
    let m = load_map(&back).unwrap();
    // the blurred cell is symmetric about its centre, so the peak is one of
    // the four central pixels
    let (x, y) = m.argmax();
    assert!((23..=24).contains(&x) && (39..=40).contains(&y), "{x} {y}");
}

#[test]
fn errors_name_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.smf");
    fs::write(&bad, b"SMF1 4 4\n\x00\x00").unwrap();
    let Err(RunError::Failed(e)) = run(["gazegrid", "encode", "--map", bad.to_str().unwrap()]) else {
        panic!("expected failure");
    };
    assert_eq!(e.kind(), "TruncatedPayload");

    let out = Command::new(env!("CARGO_BIN_EXE_gazegrid"))
        .args(["encode", "--map", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: TruncatedPayload: "), "{stderr}");

    let out = Command::new(env!("CARGO_BIN_EXE_gazegrid")).arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
