use std::process::{Command, Output};

use coca3d::metrics::{write_records, Box3D, EvalRecord};

fn c3ca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3ca")).args(args).env("C3CA_LOG", "error").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(c3ca(&["--help"]).status.code(), Some(0));
    assert_eq!(c3ca(&["--version"]).status.code(), Some(0));
    assert_eq!(c3ca(&[]).status.code(), Some(1));
    assert_eq!(c3ca(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(c3ca(&["train", "--data", "x"]).status.code(), Some(1));
    assert_eq!(c3ca(&["datagen", "--out", "x", "--count", "many"]).status.code(), Some(1));

    let missing = c3ca(&["train", "--data", "/nonexistent/data", "--out", "/nonexistent/run"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
}

#[test]
fn resolved_config_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = c3ca(&["datagen", "--out", out.to_str().unwrap(), "--count", "5", "--points", "64", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolved config (datagen)"));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["scenes"], 5);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn eval_identity_records_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let gt = Box3D::new([0.0, 0.0, 0.5], [1.0; 3]).unwrap();
    let records: Vec<EvalRecord> = ["the red box is left of the blue sphere", "a green cylinder"]
        .iter()
        .enumerate()
        .map(|(i, c)| EvalRecord {
            scene_id: Some(format!("scene_{i}")),
            object_id: Some(0),
            predicted_box: gt,
            predicted_caption: c.to_string(),
            gt_box: gt,
            references: vec![c.to_string()],
            score: 1.0,
        })
        .collect();
    write_records(&path, &records).unwrap();
    let o = c3ca(&["eval", "--records", path.to_str().unwrap(), "--metrics", "bleu4,rougel", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // The one-word-short second caption has no 4-grams, so BLEU-4 averages 0.5.
    assert_eq!(report["values"]["rougel"]["0.5"], 1.0);
    assert_eq!(report["values"]["bleu4"]["0.5"], 0.5);

    let bad = c3ca(&["eval", "--records", path.to_str().unwrap(), "--metrics", "spice"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_command() {
    let o = c3ca(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert_eq!(c3ca(&["gradcheck", "--seed", "7", "--tolerance", "1e-12"]).status.code(), Some(2));
}

#[test]
fn train_caption_retrieve_resume() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    assert!(c3ca(&["datagen", "--out", &p("data"), "--count", "12", "--points", "128"]).status.success());
    let (data, run) = (p("data"), p("run"));
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", &data, "--out", &run, "--model", "small", "--epochs", "0"];
        args.extend_from_slice(extra);
        c3ca(&args)
    };
    assert!(train(&["--max-steps", "4", "--box-head"]).status.success());
    let o = train(&["--max-steps", "6", "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["steps"], 6);
    let log = std::fs::read_to_string(p("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let o = c3ca(&["caption", "--checkpoint", &p("run"), "--data", &p("data"), "--split", "all", "--beam", "2", "--out", &p("caps.jsonl")]);
    assert!(o.status.success());
    let caps = std::fs::read_to_string(p("caps.jsonl")).unwrap();
    assert_eq!(caps.lines().count(), 12);
    assert!(caps.lines().all(|l| l.contains("\"box\"")));

    let o = c3ca(&["eval", "--predictions", &p("caps.jsonl"), "--data", &p("data"), "--json"]);
    assert!(o.status.success());
    let o = c3ca(&["retrieve", "--checkpoint", &p("run"), "--data", &p("data"), "--batch", "4"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!((0.0..=1.0).contains(&v["retrieval_top1"].as_f64().unwrap()));
}
