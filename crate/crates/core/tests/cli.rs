use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labelsearch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small synthetic fixture written by the CLI itself.
fn fixture(dir: &Path) -> PathBuf {
    let out = dir.join("fixture");
    let o = run(&[
        "synth",
        "--out",
        s(&out),
        "--n",
        "240",
        "--k",
        "3",
        "--latent-dim",
        "4",
        "--d1",
        "8",
        "--d2",
        "8",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const FAST: &[&str] = &[
    "--k",
    "3",
    "--iters",
    "20",
    "--inner-steps",
    "10",
    "--inner-lr",
    "0.05",
    "--alpha",
    "0.01",
    "--gamma",
    "0.5",
    "--subset-size",
    "200",
    "--n-subsets",
    "2",
    "--anneal-at",
    "8,16",
    "--cv-folds",
    "3",
];

fn train_args<'a>(fx: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--phi1".into(),
        fx.join("phi1.json").to_string_lossy().into(),
        "--phi2".into(),
        fx.join("phi2.json").to_string_lossy().into(),
    ];
    v.extend(FAST.iter().map(|a| a.to_string()));
    v.extend(extra.iter().map(|a| a.to_string()));
    v
}

#[test]
fn synth_writes_loadable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path());
    let m = json(&fx.join("phi1.json"));
    assert_eq!(m["n_samples"], 240);
    assert_eq!(m["dim"], 8);
    assert_eq!(m["dtype"], "f32");
    let bytes = fs::metadata(fx.join(m["data_path"].as_str().unwrap())).unwrap().len();
    assert_eq!(bytes, 240 * 8 * 4);
    let report = json(&fx.join("synth.json"));
    assert!(report["report"]["phi1_train_acc"].as_f64().unwrap() >= 0.99);
    assert!(report["config_hash"].is_string());
    assert_eq!(fs::read_to_string(fx.join("labels.txt")).unwrap().lines().count(), 240);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path());
    let sweep_dir = dir.path().join("sweep");

    let mut args = vec!["sweep".to_string()];
    args.extend(train_args(&fx, &["--seeds", "3", "--out", s(&sweep_dir)]));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 0..3 {
        let run = json(&sweep_dir.join(format!("run_000{seed}.json")));
        assert_eq!(run["seed"], seed);
        assert_eq!(run["labels"].as_array().unwrap().len(), 240);
        assert_eq!(run["objective_trace"].as_array().unwrap().len(), 20);
        assert_eq!(run["config"]["k"], 3);
        assert!(run["config_hash"].is_string());
    }
    let hash = json(&sweep_dir.join("run_0000.json"))["config_hash"].clone();

    let agg = dir.path().join("agg");
    let o = run(&["aggregate", "--runs", s(&sweep_dir), "--top-n", "2", "--out", s(&agg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = json(&agg.join("aggregate.json"));
    assert_eq!(a["config_hash"], hash);
    assert_eq!(a["voters"].as_array().unwrap().len(), 2);
    let votes = a["per_sample_votes"].as_array().unwrap();
    assert_eq!(votes.len(), 240);
    assert!(votes.iter().all(|row| row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>() == 2));
    assert_eq!(fs::read_to_string(agg.join("consensus.txt")).unwrap().lines().count(), 240);

    let eval = dir.path().join("eval.json");
    let o = run(&[
        "evaluate",
        "--labels",
        s(&agg.join("aggregate.json")),
        "--truth",
        s(&fx.join("labels.txt")),
        "--out",
        s(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = json(&eval);
    let acc = e["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(e["ari"].is_number());
    assert_eq!(e["per_class_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 240);
    assert_eq!(e["config_hash"], hash);

    let csv = dir.path().join("corr.csv");
    let o = run(&["correlate", "--runs", s(&sweep_dir), "--truth", s(&fx.join("labels.txt")), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "seed,cv_accuracy,acc");
    assert_eq!(rows.len(), 4);
    assert!(text.contains(hash.as_str().unwrap()));

    let rel = dir.path().join("reliable.json");
    let o = run(&[
        "reliable",
        "--runs",
        s(&sweep_dir),
        "--phi1",
        s(&fx.join("phi1.json")),
        "--nk",
        "4",
        "--n-neigh",
        "5",
        "--out",
        s(&rel),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&rel);
    for class in r["classes"].as_array().unwrap() {
        let n = class["indices"].as_array().unwrap().len();
        assert!(n <= 4);
        assert_eq!(class["a_nn"].as_array().unwrap().len(), n);
        assert_eq!(class["a_tau"].as_array().unwrap().len(), n);
        assert!(class["class"].is_number());
    }

    let km = dir.path().join("kmeans.json");
    let o = run(&[
        "kmeans",
        "--phi1",
        s(&fx.join("phi1.json")),
        "--k",
        "3",
        "--n-runs",
        "5",
        "--truth",
        s(&fx.join("labels.txt")),
        "--out",
        s(&km),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let k = json(&km);
    assert_eq!(k["runs"].as_array().unwrap().len(), 5);
    assert!(k["mean_acc"].as_f64().unwrap() > 0.9);
    assert!(k["config_hash"].is_string());
}

#[test]
fn train_is_reproducible_and_takes_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"eta": 2.0, "iters": 50}"#).unwrap();
    let mut outs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let mut args = vec!["train".to_string()];
        args.extend(train_args(&fx, &["--config", s(&cfg), "--iters", "12", "--seed", "4", "--out", s(&out)]));
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let run: Value = serde_json::from_slice(&outs[0]).unwrap();
    assert_eq!(run["config"]["eta"], 2.0);
    assert_eq!(run["config"]["iters"], 12);
    assert_eq!(run["seed"], 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("missing.json");
    let o = run(&["train", "--phi1", s(&missing), "--phi2", s(&missing), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));

    let fx = fixture(dir.path());
    let mut args = vec!["train".to_string()];
    args.extend(train_args(&fx, &["--gamma", "0", "--out", s(&dir.path().join("x.json"))]));
    assert_eq!(bin().args(&args).output().unwrap().status.code(), Some(2));

    let mut args = vec!["train".to_string()];
    args.extend(train_args(&fx, &["--inner-lr", "1e308", "--out", s(&dir.path().join("x.json"))]));
    let o = bin().args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn evaluate_text_labels_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let truth = dir.path().join("truth.txt");
    fs::write(&pred, "1\n1\n0\n0\n").unwrap();
    fs::write(&truth, "0\n0\n1\n1\n").unwrap();
    let o = run(&["evaluate", "--labels", s(&pred), "--truth", s(&truth)]);
    assert!(o.status.success());
    let first = String::from_utf8(o.stdout).unwrap().lines().next().unwrap().to_owned();
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["acc"], 1.0);
    assert_eq!(v["ari"], 1.0);
    assert_eq!(v["per_class_counts"], serde_json::json!([2, 2]));
}
