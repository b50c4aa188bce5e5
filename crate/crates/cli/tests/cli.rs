use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{"method": "simclr", "scenario": "class", "seed": 1,
  "data": {"n_classes": 4, "samples_per_class": 30, "input_dim": 8},
  "arch": {"backbone_hidden": [16], "feature_dim": 8, "projector_hidden": 32, "proj_dim": 6},
  "training": {"steps_per_task": 10, "batch_size": 16}, "probe": {"epochs": 3}}"#;

fn cassle(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cassle")).args(args).current_dir(dir).env_remove("CSSL_THREADS").output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    dir
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = setup();
    let out = cassle(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = cassle(&["run", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(cassle(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let out = cassle(&["gradcheck", "--instances", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("19 of 19 cases passed"), "{text}");
}

#[test]
fn run_twice_gives_identical_reports() {
    let dir = setup();
    for o in ["a", "b"] {
        let out = cassle(&["run", "--config", "c.json", "--seed", "7", "--out", o], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |o: &str| {
        let text = std::fs::read_to_string(dir.path().join(o).join("report.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["wall_clock_seconds"].is_number());
        v["wall_clock_seconds"] = serde_json::Value::Null;
        v
    };
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a")["config"]["seed"], 7);
    for f in ["metrics.csv", "matrix.csv", "checkpoints/task_1.csle", "checkpoints/task_2.csle"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    cassle(&["run", "--config", "c.json", "--seed", "7", "--out", "c", "--canonical"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/report.json")).unwrap()).unwrap();
    assert!(v["wall_clock_seconds"].is_null());
}

#[test]
fn flags_override_the_config() {
    let dir = setup();
    let out = cassle(
        &["run", "--config", "c.json", "--method", "barlow", "--scenario", "data", "--tasks", "3", "--strategy", "ewc", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["method"], "barlow");
    assert_eq!(v["config"]["scenario"], "data_inc");
    assert_eq!(v["config"]["strategy"], "ewc");
    assert_eq!(v["tasks"], 3);
}

#[test]
fn fan_out_writes_one_directory_per_run() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_cassle"))
        .args(["run", "--config", "c.json", "--seed", "1,2", "--strategy", "finetune,cassle", "--out", "sweep"])
        .current_dir(dir.path())
        .env("CSSL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for d in ["finetune_seed1", "finetune_seed2", "cassle_seed1", "cassle_seed2"] {
        assert!(dir.path().join("sweep").join(d).join("report.json").exists());
    }
    let csv = std::fs::read_to_string(dir.path().join("sweep/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("sweep/accuracy.svg").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_cassle"))
        .args(["run", "--config", "c.json", "--out", "x"])
        .current_dir(dir.path())
        .env("CSSL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn validation_and_numeric_failures_have_distinct_codes() {
    let dir = setup();
    assert_eq!(cassle(&["run", "--config", "missing.json"], dir.path()).status.code(), Some(1));
    assert_eq!(cassle(&["run", "--method", "simclr"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.json"), r#"{"method": "simclr", "scenario": "class", "seed": 0, "losses": {"temperature": -1}}"#).unwrap();
    let out = cassle(&["run", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("losses.temperature"));

    let mut v: serde_json::Value = serde_json::from_str(CONFIG).unwrap();
    v["optimizer"] = serde_json::json!({"kind": "sgd", "global_lr": 1e150});
    std::fs::write(dir.path().join("diverge.json"), v.to_string()).unwrap();
    let out = cassle(&["run", "--config", "diverge.json", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/report.json")).unwrap()).unwrap();
    assert_eq!(r["complete"], false);
}

#[test]
fn eval_gen_data_and_plot() {
    let dir = setup();
    assert_eq!(cassle(&["run", "--config", "c.json", "--out", "r"], dir.path()).status.code(), Some(0));
    let out = cassle(&["eval", "--checkpoint", "r/checkpoints/task_2.csle", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["probe_accuracy"].as_array().unwrap().len(), 2);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(v["checkpoint_digest"], report["checkpoint_digests"][1]);
    assert_eq!(v["probe_accuracy"], report["accuracy"][1]);

    for (name, seed) in [("train.csfe", "0"), ("test.csfe", "0")] {
        let out = cassle(&["gen-data", "--out", name, "--classes", "3", "--per-class", "20", "--dim", "6", "--seed", seed], dir.path());
        assert_eq!(out.status.code(), Some(0));
    }
    let out = cassle(&["eval", "--train-features", "train.csfe", "--test-features", "test.csfe", "--knn-k", "1"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // identical dumps: each sample is its own nearest neighbor
    assert_eq!(v["knn_accuracy"], 1.0);
    // two of the three class means lie close together for this seed
    assert!(v["probe_accuracy"].as_f64().unwrap() > 0.8);

    let out = cassle(&["plot", "r/report.json", "--out", "p.svg"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read_to_string(dir.path().join("p.svg")).unwrap().contains("<polyline"));
    assert_eq!(cassle(&["plot", "--out", "p.svg"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("junk.json"), "{}").unwrap();
    assert_eq!(cassle(&["plot", "junk.json"], dir.path()).status.code(), Some(1));
}

#[test]
fn gen_data_converts_cifar() {
    let dir = setup();
    let mut bytes = vec![4u8, 42];
    bytes.extend(std::iter::repeat(255u8).take(3072));
    std::fs::write(dir.path().join("train.bin"), &bytes).unwrap();
    let out = cassle(&["gen-data", "--cifar", "train.bin", "--out", "c.csfe"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let dump = std::fs::read(dir.path().join("c.csfe")).unwrap();
    assert_eq!(dump.len(), 12 + 3072 * 8 + 4);
    std::fs::write(dir.path().join("short.bin"), &bytes[..100]).unwrap();
    assert_eq!(cassle(&["gen-data", "--cifar", "short.bin", "--out", "s.csfe"], dir.path()).status.code(), Some(1));
}
