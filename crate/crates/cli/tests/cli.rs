use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fliqs(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fliqs"))
        .args(args)
        .env("FLIQS_OUT", out)
        .output()
        .expect("binary runs")
}

fn run_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn blob_config(steps: u64) -> Value {
    json!({
        "model": {"preset": "mlp-2x16"},
        "data": {"blobs": {"classes": 3, "dims": 6, "n_per_class": 60, "separation": 4.0}},
        "total_steps": steps,
        "cost_target": {"interpolate": {"low": "INT4", "high": "INT8", "fraction": 0.5}},
        "trainer": {"batch_size": 16}
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn search_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &blob_config(40));
    let dir = run_dir(&fliqs(tmp.path(), &["search", &cfg, "--seed", "11"]));
    for f in ["trace.csv", "result.json", "served_config.json", "weights.bin", "resolved_config.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("search-"));
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-11"));
    let resolved = read_json(&dir.join("resolved_config.json"));
    assert_eq!(resolved["seed"], 11);
    assert_eq!(fs::read_to_string(dir.join("trace.csv")).unwrap().lines().count(), 41);

    // The resolved config alone reproduces the trace.
    let again = run_dir(&fliqs(tmp.path(), &["search", dir.join("resolved_config.json").to_str().unwrap()]));
    assert_ne!(again, dir);
    assert_eq!(fs::read(dir.join("trace.csv")).unwrap(), fs::read(again.join("trace.csv")).unwrap());

    let info = fliqs(tmp.path(), &["serve-info", dir.to_str().unwrap(), "--evaluate", "--json"]);
    assert!(info.status.success(), "{}", stderr(&info));
    let info: Value = serde_json::from_slice(&info.stdout).unwrap();
    let result = read_json(&dir.join("result.json"));
    assert_eq!(info["validation_accuracy"], result["served_accuracy"]);
    let rel = (info["cost_gbops"].as_f64().unwrap() / result["served_cost_gbops"].as_f64().unwrap() - 1.0).abs();
    assert!(rel < 1e-12);
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = blob_config(10);
    bad["foo"] = json!(1);
    let cfg = write(tmp.path(), "bad.json", &bad);
    let o = fliqs(tmp.path(), &["search", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));

    let cfg = write(tmp.path(), "ok.json", &blob_config(10));
    let o = fliqs(tmp.path(), &["search", &cfg, "--set", "trainer.nope=3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fliqs(tmp.path(), &["search", &cfg, "--set", "act_quant_start_fraction=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().read_dir().unwrap().any(|e| e.unwrap().path().is_dir()));
}

#[test]
fn runtime_failure_keeps_partial_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &blob_config(60));
    let o = fliqs(tmp.path(), &["search", &cfg, "--set", "trainer.learning_rate=1e300"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let dir = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("run directory");
    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,"));
    assert!(trace.lines().count() < 61);
    assert!(!dir.join("weights.bin").exists());
}

#[test]
fn uniform_records_single_format() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &blob_config(20));
    let dir = run_dir(&fliqs(tmp.path(), &["uniform", &cfg, "--format", "INT8"]));
    assert_eq!(read_json(&dir.join("resolved_config.json"))["search_space"], json!(["INT8"]));
    let again = run_dir(&fliqs(tmp.path(), &["uniform", dir.join("resolved_config.json").to_str().unwrap()]));
    assert_eq!(fs::read(dir.join("trace.csv")).unwrap(), fs::read(again.join("trace.csv")).unwrap());
    assert_eq!(fliqs(tmp.path(), &["uniform", &cfg]).status.code(), Some(2));
    assert_eq!(fliqs(tmp.path(), &["uniform", &cfg, "--format", "INT99"]).status.code(), Some(2));
}

fn cost_total(tmp: &Path, args: &[&str]) -> f64 {
    let mut full = vec!["cost", "--json"];
    full.extend_from_slice(args);
    let o = fliqs(tmp, &full);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice::<Value>(&o.stdout).unwrap()["total_gbops"].as_f64().unwrap()
}

#[test]
fn cost_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let bf16 = cost_total(tmp.path(), &["--manifest", "resnet18", "--uniform", "BF16"]);
    let int8 = cost_total(tmp.path(), &["--manifest", "resnet18", "--uniform", "INT8"]);
    assert!((bf16 / 467.7 - 1.0).abs() < 0.01, "{bf16}");
    assert!((int8 / 116.9 - 1.0).abs() < 0.01, "{int8}");

    let manifest: Value = serde_json::from_str(
        &fliqs_core::costmodel::ModelManifest::bundled("resnet18").unwrap().to_json(),
    )
    .unwrap();
    let names: Vec<&str> = manifest["layers"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["searchable"] == true)
        .map(|l| l["name"].as_str().unwrap())
        .take(2)
        .collect();
    let a = write(
        tmp.path(),
        "assign.json",
        &json!({"default": "INT8", "layers": {names[0]: "BF16", names[1]: {"format": "BF16"}}}),
    );
    let mixed = cost_total(tmp.path(), &["--manifest", "resnet18", "--assignment", &a]);
    assert!(int8 < mixed && mixed < bf16, "{int8} {mixed} {bf16}");

    let text = fliqs(tmp.path(), &["cost", "--manifest", "mobilenetv2", "--uniform", "INT4"]);
    assert!(String::from_utf8(text.stdout).unwrap().lines().last().unwrap().starts_with("total"));

    let partial = write(tmp.path(), "partial.json", &json!({"layers": {names[0]: "BF16"}}));
    let o = fliqs(tmp.path(), &["cost", "--manifest", "resnet18", "--assignment", &partial]);
    assert_eq!(o.status.code(), Some(2));
    let unknown = write(tmp.path(), "unknown.json", &json!({"default": "INT8", "layers": {"zzz": "INT4"}}));
    assert_eq!(fliqs(tmp.path(), &["cost", "--manifest", "resnet18", "--assignment", &unknown]).status.code(), Some(2));
    assert_eq!(fliqs(tmp.path(), &["cost", "--manifest", "vgg99", "--uniform", "INT8"]).status.code(), Some(2));
}

#[test]
fn analyze_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&fliqs(tmp.path(), &["analyze", "switching", "--set", "synth.trials=40", "--set", "synth.tensor_size=2000"]));
    let csv = fs::read_to_string(dir.join("switching.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k1,mean,stderr");
    let k1: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(k1, ["4", "5", "6", "7", "8"]);
    assert!(read_json(&dir.join("switching.json"))["fit"]["r_squared"].as_f64().unwrap() > 0.9);

    let dir = run_dir(&fliqs(
        tmp.path(),
        &["analyze", "clipping", "--set", "synth.trials=5", "--set", "synth.outlier_rate=0.001"],
    ));
    let report = read_json(&dir.join("clipping.json"));
    assert!(report["optimal_percentile"]["INT4"].as_f64().is_some());
    assert!(report["optimal_percentile"]["INT8"].as_f64().is_some());
    assert!(dir.join("clipping_INT4.csv").is_file());

    let o = fliqs(tmp.path(), &["analyze", "switching", "--set", "synth.distribution=cauchy"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fliqs(tmp.path(), &["analyze", "entropy"]).status.code(), Some(2));

    let cfg = write(tmp.path(), "cfg.json", &blob_config(200));
    let search = run_dir(&fliqs(tmp.path(), &["search", &cfg]));
    let trace = search.join("trace.csv");
    let dir = run_dir(&fliqs(tmp.path(), &["analyze", "entropy", "--trace", trace.to_str().unwrap()]));
    let report = read_json(&dir.join("entropy.json"));
    assert_eq!(report["steps"], 150);
    assert!(report["spearman"].as_f64().unwrap().abs() <= 1.0);

    let short = write(tmp.path(), "short.json", &blob_config(100));
    let search = run_dir(&fliqs(tmp.path(), &["search", &short]));
    let o = fliqs(tmp.path(), &["analyze", "entropy", "--trace", search.join("trace.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let fp8 = write(
        tmp.path(),
        "fp8.json",
        &json!({"base": blob_config(15), "formats": ["E1M6", "E2M5", "E3M4", "E4M3", "E5M2"]}),
    );
    let dir = run_dir(&fliqs(tmp.path(), &["sweep", "uniform-formats", &fp8, "--jobs", "3"]));
    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(4).unwrap().starts_with("E4M3,"));

    let pareto = write(
        tmp.path(),
        "pareto.json",
        &json!({
            "base": blob_config(15),
            "targets": [{"uniform": "INT4"}, {"uniform": "INT8"}, {"gbops": 1e-4}],
            "seeds": [0, 1, 2]
        }),
    );
    let dir = run_dir(&fliqs(tmp.path(), &["sweep", "pareto", &pareto, "--jobs", "4"]));
    assert_eq!(fs::read_to_string(dir.join("results.csv")).unwrap().lines().count(), 10);
    let rows = fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(rows, 9);

    let empty = write(tmp.path(), "empty.json", &json!({"base": blob_config(5), "targets": []}));
    assert_eq!(fliqs(tmp.path(), &["sweep", "pareto", &empty]).status.code(), Some(2));
}
