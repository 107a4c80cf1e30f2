use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftsam_core::peft::count_params;
use peftsam_harness::checkpoint::Checkpoint;

fn peftsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftsam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = peftsam(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    peftsam(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&[
            "gen-data", "--out", s(&data), "--size", "32", "--n-train", "4", "--n-val", "1", "--n-test", "2",
            "--min-inst", "1", "--max-inst", "2", "--min-r", "3", "--max-r", "5", "--seed", "1",
        ]);
        Fixture { _dir: dir, root, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, out: &Path, method: &[&str]) -> Output {
        let mut args = vec![
            "train", "--data", s(&self.data), "--preset", "micro", "--max-epochs", "2", "--objects-per-image", "2",
            "--lr", "1e-3", "--out", s(out),
        ];
        args.extend_from_slice(method);
        peftsam(&args)
    }
}

#[test]
fn train_eval_export_round_trip() {
    let fx = Fixture::new();
    let ck = fx.path("lora.ckpt");
    let out = fx.train(&ck, &["--method", "lora", "--rank", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let log = fs::read_to_string(fx.path("lora.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    // save -> load -> save is byte-stable
    let bytes = fs::read(&ck).unwrap();
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    let training = loaded.training.as_ref().unwrap();
    assert_eq!(training.epochs_run, 2);

    let jsonl = fx.path("eval.jsonl");
    let csv = fx.path("eval.csv");
    let stdout = ok(&[
        "eval", "--ckpt", s(&ck), "--data", s(&fx.data), "--out-jsonl", s(&jsonl), "--out-csv", s(&csv),
    ]);
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(stdout, table);
    let mut rows = table.lines();
    assert_eq!(
        rows.next().unwrap(),
        "experiment,method,seed,task,value,params_trainable,act_bytes"
    );
    let rows: Vec<Vec<&str>> = rows.map(|r| r.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let trainable = count_params(&loaded.model.store).trainable_params.to_string();
    for r in &rows {
        assert_eq!(r[1], "lora");
        assert_eq!(r[5], trainable);
        let v: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let lines: Vec<serde_json::Value> = fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let results = lines.iter().filter(|l| l["kind"] == "result").count();
    let objects: Vec<_> = lines.iter().filter(|l| l["kind"] == "object").collect();
    assert_eq!(results, 2 * 5);
    assert!(!objects.is_empty());
    for o in objects {
        assert_eq!(o["metrics"].as_array().unwrap().len(), 8);
    }

    // evaluation is deterministic
    let again = ok(&["eval", "--ckpt", s(&ck), "--data", s(&fx.data)]);
    assert_eq!(again, table);

    let merged = fx.path("merged.ckpt");
    let out = ok(&["export", "--ckpt", s(&ck), "--merge-lora", "--out", s(&merged)]);
    let diff: f64 = out.lines().next().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(diff < 1e-5, "{out}");
    assert!(Checkpoint::load(&merged).unwrap().config.peft.is_none());
    // a merged model has no adapters to merge
    assert_eq!(code(&["export", "--ckpt", s(&merged), "--merge-lora", "--out", s(&fx.path("x"))]), 2);
}

#[test]
fn training_is_reproducible() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a.ckpt"), fx.path("b.ckpt"));
    for p in [&a, &b] {
        assert!(fx.train(p, &["--method", "ssf", "--seed", "3"]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn qlora_export_needs_base_weights() {
    let fx = Fixture::new();
    let base = fx.path("base.ckpt");
    ok(&["init", "--preset", "micro", "--seed", "0", "--out", s(&base)]);
    let ck = fx.path("q.ckpt");
    let out = fx.train(&ck, &["--method", "qlora", "--rank", "2", "--quant-block", "16", "--init", s(&base)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ex = fx.path("ex.ckpt");
    ok(&["export", "--ckpt", s(&ck), "--qlora-full-precision", "--base", s(&base), "--out", s(&ex)]);
    let m = Checkpoint::load(&ex).unwrap();
    assert_eq!(m.config.method_name(), "lora");
    assert_eq!(count_params(&m.model.store).quantized_params, 0);
    assert_ne!(code(&["export", "--ckpt", s(&ck), "--qlora-full-precision", "--out", s(&ex)]), 0);
}

#[test]
fn errors_map_to_exit_codes() {
    let fx = Fixture::new();
    let ck = fx.path("c.ckpt");
    // rank not below the micro embed width
    assert_eq!(fx.train(&ck, &["--method", "lora"]).status.code(), Some(2));
    // a method flag without a method
    assert_eq!(fx.train(&ck, &["--rank", "2"]).status.code(), Some(2));
    assert_eq!(fx.train(&ck, &["--method", "nonsense"]).status.code(), Some(2));
    let missing = fx.path("missing");
    assert_eq!(
        code(&["train", "--data", s(&missing), "--preset", "micro", "--out", s(&ck)]),
        3
    );
    assert_eq!(code(&["eval", "--ckpt", s(&missing), "--data", s(&fx.data)]), 3);
    assert_eq!(code(&["mem-report", "--preset", "vit-b-shape"]), 2);
}

#[test]
fn count_params_reports_the_reference_delta() {
    let out = ok(&["count-params", "--preset", "vit-b-shape", "--method", "lora"]);
    assert!(out.contains("encoder trainable") && out.contains("1179648"), "{out}");
    assert!(out.contains("reference 1.18M"), "{out}");
    let out = ok(&["mem-report", "--preset", "micro", "--method", "freeze_encoder"]);
    let blocks = out.lines().find(|l| l.starts_with("encoder blocks")).unwrap();
    assert_eq!(blocks.split_whitespace().nth(2), Some("0"));
}

#[test]
fn sweep_keeps_failed_points() {
    let fx = Fixture::new();
    let grid = fx.path("grid.json");
    fs::write(&grid, r#"{"method": ["lora"], "rank": [2, 64]}"#).unwrap();
    let csv = fx.path("sweep.csv");
    ok(&[
        "sweep", "--grid", s(&grid), "--out-csv", s(&csv), "--data", s(&fx.data), "--preset", "micro",
        "--max-epochs", "1", "--objects-per-image", "1", "--tasks", "box,ais",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with(",status,config"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",ok,")).count(), 2);
    let failed: Vec<_> = rows.iter().filter(|r| r.contains("failed:")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("\"rank\":64") || failed[0].contains("\"\"rank\"\":64"));
}
