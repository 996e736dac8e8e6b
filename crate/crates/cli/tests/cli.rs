use std::path::Path;
use std::process::{Command, Output};

fn cpsearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpsearch")).args(args).output().expect("binary runs")
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has a record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

const FAST_SEARCH: &str = r#"
[space]
models = ["ridge", "forest"]
calibrations = ["split", "kfold"]
[space.ranges.forest]
n_trees = [10, 20]
max_depth = [2, 4]
[space.calibration]
folds = [2, 3]
[budget]
n_init = 2
n_iter = 1
j_folds = 2
"#;

#[test]
fn preset_bench_writes_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str, jobs: &str| {
        let out_dir = tmp.path().join(sub);
        let out = cpsearch(&[
            "bench", "--data", "synthetic:gaussian:300", "--preset", "scp-ridge", "--splits", "5", "--seed", "3",
            "--jobs", jobs, "--out", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["algorithm"], "SCP-Ridge");
        assert_eq!(summary["splits"], 5);
        out_dir
    };
    let a = run("a", "1");
    let b = run("b", "2");
    for f in ["records.jsonl", "summary.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_eq!(read(&a, "records.jsonl").lines().count(), 5);
    assert_eq!(read(&a, "timings.jsonl").lines().count(), 5);
    assert!(read(&a, "summary.csv").starts_with("schema_version,"));
}

#[test]
fn search_bench_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("search.toml");
    std::fs::write(&cfg, FAST_SEARCH).unwrap();
    let search = tmp.path().join("search");
    let preset = tmp.path().join("preset");
    let common = ["--data", "synthetic:sine:200", "--splits", "2", "--seed", "1"];
    let mut args = vec!["bench"];
    args.extend(common);
    args.extend(["--config", cfg.to_str().unwrap(), "--out", search.to_str().unwrap()]);
    let out = cpsearch(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read(&search, "records.jsonl");
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(first["algorithm"], "AutoCP");
    assert_eq!(first["evaluations"], 5);
    assert_eq!(first["dataset"], "sine");

    let mut args = vec!["bench"];
    args.extend(common);
    args.extend(["--preset", "SCP-RF", "--out", preset.to_str().unwrap()]);
    assert!(cpsearch(&args).status.success());

    let plot = tmp.path().join("plot");
    let out = cpsearch(&["plotdata", search.to_str().unwrap(), preset.to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&plot, "normalized_lengths.csv");
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!(values.iter().all(|&v| v > 0.0 && v <= 1.0));
    assert!(values.contains(&1.0));
}

#[test]
fn gain_writes_three_length_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("search.toml");
    let toml = FAST_SEARCH.replace(r#"models = ["ridge", "forest"]"#, r#"models = ["ridge", "forest", "mlp"]"#);
    std::fs::write(&cfg, format!("{toml}\n[space.ranges.mlp]\nhidden = [8, 10]\nlayers = [1, 1]\nepochs = [50, 55]\n")).unwrap();
    let out_dir = tmp.path().join("gain");
    let out = cpsearch(&[
        "gain", "--data", "synthetic:heteroscedastic:200", "--splits", "2", "--config", cfg.to_str().unwrap(), "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(&out_dir, "gain.csv");
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|h| h.ends_with("_length")).count(), 3);
    for line in read(&out_dir.join("model_cal"), "records.jsonl").lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["spec"]["estimator"], "cqr");
    }
}

#[test]
fn cate_scores_counterfactuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpsearch(&[
        "cate", "--data", "synthetic:two_arm", "--treatment", "t", "--y0", "y0", "--y1", "y1", "--preset",
        "scp-ridge", "--out", tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["cate_coverage"].as_f64().unwrap() > 0.8);
    assert!((report["guaranteed_level"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(read(tmp.path(), "cate_intervals.csv").lines().count(), 401);
}

#[test]
fn failures_emit_error_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    let missing = cpsearch(&["bench", "--data", "/nonexistent/file.csv", "--preset", "scp-rf", "--out", out_dir]);
    assert_eq!(error_record(&missing)["error"], "io");

    let alpha = cpsearch(&["bench", "--data", "synthetic:gaussian:100", "--alpha", "1.5", "--preset", "scp-rf", "--out", out_dir]);
    assert_eq!(error_record(&alpha)["error"], "invalid_input");

    let preset = cpsearch(&["bench", "--data", "synthetic:gaussian:100", "--preset", "nope", "--out", out_dir]);
    let rec = error_record(&preset);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("SCP-Ridge"));

    let usage = cpsearch(&["bench", "--out", out_dir]);
    assert_eq!(error_record(&usage)["error"], "usage");
    assert_eq!(usage.status.code(), Some(2));

    let bad_csv = tmp.path().join("bad.csv");
    std::fs::write(&bad_csv, "a,b\n1,2\nx,3\n").unwrap();
    let parse = cpsearch(&["bench", "--data", bad_csv.to_str().unwrap(), "--preset", "scp-rf", "--out", out_dir]);
    let rec = error_record(&parse);
    assert_eq!(rec["error"], "parse");
    assert!(rec["message"].as_str().unwrap().contains("row"));

    let cate = cpsearch(&["cate", "--data", "synthetic:gaussian", "--treatment", "t", "--out", out_dir]);
    assert_eq!(error_record(&cate)["error"], "invalid_input");
}
