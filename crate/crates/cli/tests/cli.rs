use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn dot(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dot")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dot(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn manifest_ok(dir: &Path, command: &str) -> Value {
    let m = json(dir.join("manifest.json"));
    assert_eq!(m["command"], command);
    let hash = m["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(m["commit"].as_str().is_some_and(|c| !c.is_empty()));
    m
}

#[test]
fn gen_writes_examples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gen", "--config", &config("gen_lookup.json"), "--out", out, "--seed", "3"]);
    let lines = std::fs::read_to_string(dir.path().join("examples.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1000);
    let report = json(dir.path().join("report.json"));
    assert!(report["min_tokens"].as_u64().unwrap() >= 64);
    let m = manifest_ok(dir.path(), "gen");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["generator"]["seed"], 3);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        &config("train_tiny.json"),
        "--out",
        run.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 40);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "answer_score_gap"] {
        assert!(first.get(key).is_some(), "{key} missing from {first}");
    }
    let report = json(run.join("report.json"));
    assert!(report["npe_per_sec"].as_f64().unwrap() > 0.0);
    let eval = &report["eval"];
    assert_eq!(eval["n"], 32);
    assert_eq!(eval["rescorer_agrees"], true);

    // one histogram entry per example whose answer survived preselection
    let mut rows = csv::Reader::from_path(run.join("histogram.csv")).unwrap();
    let counted: u64 = rows.records().map(|r| r.unwrap()[2].parse::<u64>().unwrap()).sum();
    assert_eq!(counted, eval["score_gap"]["n"].as_u64().unwrap());
    let bucketed: u64 = eval["buckets"].as_array().unwrap().iter().map(|b| b["n"].as_u64().unwrap()).sum();
    assert_eq!(bucketed, 32);
    let m = manifest_ok(&run, "train");
    assert_eq!(m["threads"], 2);
    assert_eq!(m["precision"], "f32");

    // fresh examples shaped like the training data
    let tiny = json(PathBuf::from(config("train_tiny.json")));
    let gen = serde_json::json!({ "schema_version": 1, "generator": tiny["data"]["eval"]["synthetic"] });
    let gen_path = dir.path().join("gen.json");
    std::fs::write(&gen_path, gen.to_string()).unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--config", gen_path.to_str().unwrap(), "--seed", "5", "--out", data.to_str().unwrap()]);
    let ev = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let examples = data.join("examples.jsonl");
    let eval_args = |out: &Path, extra: &[&str]| {
        let mut a = vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            examples.to_str().unwrap(),
            "--buckets",
            "16,24",
        ];
        a.push("--out");
        a.push(out.to_str().unwrap());
        a.extend_from_slice(extra);
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let args = eval_args(&ev, &[]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let rep = json(ev.join("report.json"));
    assert_eq!(rep["n"], 32);
    let labels: Vec<&str> = rep["buckets"].as_array().unwrap().iter().map(|b| b["bucket"].as_str().unwrap()).collect();
    assert!(labels.iter().all(|l| ["<16", "[16,24)", ">=24"].contains(l)), "{labels:?}");
    manifest_ok(&ev, "eval");

    let oracle = dir.path().join("oracle");
    let args = eval_args(&oracle, &["--oracle-scores"]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let rep = json(oracle.join("report.json"));
    assert_eq!(rep["answer_pruned"], 0);
}

#[test]
fn params_prints_published_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "params",
        "TAPAS(mini)@256",
        "DoT(m->256->l)@1024",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stdout.contains("11105280"), "{stdout}");
    assert!(stdout.contains("299880192"), "{stdout}");
    let rows = json(dir.path().join("report.json"));
    assert_eq!(rows[0]["params"], 11_105_280);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let text = std::fs::read_to_string(config("train_tiny.json")).unwrap().replacen("\"k\": 12", "\"k\": 12, \"kk\": 1", 1);
    std::fs::write(&cfg, text).unwrap();
    let out = dot(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));

    let text = std::fs::read_to_string(config("gen_lookup.json")).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
    std::fs::write(&cfg, text).unwrap();
    let out = dot(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dot(&["params", "TAPAS(huge)@256"]).status.success());
}

#[test]
fn verify_passes_with_few_cases() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["verify", "--cases", "5", "--coords", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("PASS"), "{stdout}");
    let rep = json(dir.path().join("report.json"));
    assert_eq!(rep["passed"], true);
    manifest_ok(dir.path(), "verify");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let name = path.file_name().unwrap().to_str().unwrap();
        if name.starts_with("gen_") {
            dot_cli::config::parse_gen(&text).unwrap();
        } else {
            let cfg = dot_cli::config::parse_run(&text).unwrap();
            cfg.model.resolve(100).unwrap();
            cfg.train.validate().unwrap();
        }
        seen += 1;
    }
    assert!(seen >= 3);
}
