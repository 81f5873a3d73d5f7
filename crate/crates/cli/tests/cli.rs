use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynamo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynamo"))
        .args(args)
        .arg("--deterministic-logs")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(out: &Path, seed: &str) -> Output {
    dynamo(&[
        "gen-data", "--out", s(out), "--clips", "16", "--t", "4", "--h", "16", "--w", "16", "--size-min", "2",
        "--size-max", "3", "--speeds", "1", "--seed", seed,
    ])
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.dynv"), dir.path().join("b.dynv"), dir.path().join("c.dynv"));
    assert!(gen_small(&a, "7").status.success());
    assert!(gen_small(&b, "7").status.success());
    assert!(gen_small(&c, "8").status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[..4], b"DYNV");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dynamo(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(dynamo(&["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("missing.dynv");
    assert_eq!(dynamo(&["eval", "--identity", "--data", s(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.dynv");
    fs::write(&bad, b"NOPE....").unwrap();
    assert_eq!(dynamo(&["eval", "--identity", "--data", s(&bad)]).status.code(), Some(2));
    let out = dir.path().join("d.dynv");
    let infeasible = dynamo(&["gen-data", "--out", s(&out), "--t", "40", "--h", "8", "--w", "8"]);
    assert_eq!(infeasible.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&infeasible.stderr).is_empty());
    assert_eq!(dynamo(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_predict_compare() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert!(gen_small(&p("d.dynv"), "1").status.success());
    let train = dynamo(&[
        "train", "--data", s(&p("d.dynv")), "--out", s(&p("m.dynm")), "--trace", s(&p("t.jsonl")), "--epochs", "2",
        "--batch-size", "4", "--filter-size", "3", "--dmr-dim", "8", "--ar-dim", "4", "--trunk-channels", "2,2",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let log = String::from_utf8_lossy(&train.stderr);
    assert!(log.contains("resolved config") && log.contains("\"delta\":0.01") && log.contains("\"momentum\":0.9"));
    let trace = fs::read_to_string(p("t.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "loss_fp", "loss_cls", "loss_total", "train_acc"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    let eval = dynamo(&["eval", "--model", s(&p("m.dynm")), "--data", s(&p("d.dynv")), "--out", s(&p("r.json"))]);
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["num_clips"], 16);
    assert!(dynamo(&["eval", "--identity", "--data", s(&p("d.dynv")), "--out", s(&p("i.json"))]).status.success());
    let cmp = dynamo(&["compare", s(&p("r.json")), s(&p("i.json"))]);
    assert!(cmp.status.success());
    let cmp: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    assert!(cmp["accuracy_delta"].is_number());

    let pred = dynamo(&["predict", "--model", s(&p("m.dynm")), "--data", s(&p("d.dynv")), "--clip", "3", "--out-dir", s(&p("out"))]);
    assert!(pred.status.success());
    let mut names: Vec<String> = fs::read_dir(p("out")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let mut want: Vec<String> = (0..4).flat_map(|i| ["diff", "gt", "pred"].map(|k| format!("{k}_{i:02}.pgm"))).collect();
    want.sort();
    assert_eq!(names, want);
    let out_of_range = dynamo(&["predict", "--model", s(&p("m.dynm")), "--data", s(&p("d.dynv")), "--clip", "99", "--out-dir", s(&p("o2"))]);
    assert_eq!(out_of_range.status.code(), Some(1));
}

#[test]
fn compare_rejects_different_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert!(gen_small(&p("a.dynv"), "1").status.success());
    assert!(gen_small(&p("b.dynv"), "2").status.success());
    assert!(dynamo(&["eval", "--identity", "--data", s(&p("a.dynv")), "--out", s(&p("a.json"))]).status.success());
    assert!(dynamo(&["eval", "--identity", "--data", s(&p("b.dynv")), "--out", s(&p("b.json"))]).status.success());
    assert_eq!(dynamo(&["compare", s(&p("a.json")), s(&p("b.json"))]).status.code(), Some(1));
}

#[test]
fn grad_check_reports_every_op() {
    let out = dynamo(&["grad-check", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for op in ["relu", "matmul.lhs", "conv3d.input", "softmax", "make_filters", "apply_filters.logits", "huber_fp.frame-norm", "cross_entropy", "composite.cls.weight"] {
        assert!(text.contains(op), "{op} missing");
    }
    assert!(text.trim_end().ends_with("PASS"));
}
