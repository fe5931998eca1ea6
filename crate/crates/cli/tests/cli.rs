use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gesf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gesf")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the synthetic two-type dataset into `dir/data`.
fn dataset(dir: &Path, mode: &str) -> PathBuf {
    let data = dir.join("data");
    let out = gesf(&["synth", "--kind", "hetero", "--mode", mode, "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn train_args<'a>(data: &'a Path, out: &'a Path) -> Vec<String> {
    [
        "train",
        "--edges",
        s(&data.join("edges.tsv")),
        "--types",
        s(&data.join("types.tsv")),
        "--labels",
        s(&data.join("labels.tsv")),
        "--frac",
        "0.5",
        "--seed",
        "0",
        "--rank",
        "3",
        "--epochs",
        "60",
        "--out",
        s(out),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

fn run(args: &[String]) -> Output {
    gesf(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn train_writes_outputs_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "multiclass");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&train_args(&data, out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.ckpt", "metrics.json", "metrics.csv", "config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );

    let eval_out = dir.path().join("eval");
    let o = gesf(&[
        "eval",
        "--edges",
        s(&data.join("edges.tsv")),
        "--types",
        s(&data.join("types.tsv")),
        "--labels",
        s(&data.join("labels.tsv")),
        "--model",
        s(&a.join("model.ckpt")),
        "--out",
        s(&eval_out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(eval_out.join("metrics.json")).unwrap()
    );
}

#[test]
fn missing_label_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "multiclass");
    let missing = dir.path().join("no-such-labels.tsv");
    let mut args = train_args(&data, &dir.path().join("out"));
    let i = args.iter().position(|a| a == "--labels").unwrap();
    args[i + 1] = s(&missing).to_string();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("io") && err.contains("no-such-labels.tsv"), "{err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "multiclass");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 5, "learning_rat": 0.1}"#).unwrap();
    let mut args = train_args(&data, &dir.path().join("out"));
    args.extend(["--config".to_string(), s(&cfg).to_string()]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn sweep_reports_grid_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "multilabel");
    let out = dir.path().join("sweep");
    let o = gesf(&[
        "sweep",
        "--edges",
        s(&data.join("edges.tsv")),
        "--types",
        s(&data.join("types.tsv")),
        "--labels",
        s(&data.join("labels.tsv")),
        "--mode",
        "multilabel",
        "--frac",
        "0.5",
        "--seed",
        "0,1,2",
        "--rank",
        "3",
        "--epochs",
        "40",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    let aggs = report["aggregates"].as_array().unwrap();
    assert_eq!(aggs.len(), 2);
    assert!(aggs.iter().all(|a| a["n"] == 3));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn sweep_with_failing_cells_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "multiclass");
    let out = dir.path().join("sweep");
    let o = gesf(&[
        "sweep",
        "--edges",
        s(&data.join("edges.tsv")),
        "--types",
        s(&data.join("types.tsv")),
        "--labels",
        s(&data.join("labels.tsv")),
        "--seed",
        "0",
        "--rank",
        "9999",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.join("metrics.json").exists());
}

#[test]
fn check_suites() {
    for suite in ["oracle", "grad"] {
        let o = gesf(&["checks", "--suite", suite]);
        assert_eq!(o.status.code(), Some(0), "{suite}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.lines().count() >= 3);
        assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    }
    let o = gesf(&["checks", "--suite", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
