use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use imbforge_core::{Matrix, NetworkParams};

const BLOBS: &str = r#"
dataset = "blobs"
blob_counts = [1000, 100, 10]
epochs = 30
eta = 0.05
seed = 3
ablate_seeds = [0, 1]
"#;

fn imbforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imbforge"))
        .args(args)
        .env_remove("IMBFORGE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_train_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let start = Instant::now();

    ok(&imbforge(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        s(&data),
    ]));
    for f in ["train.csv", "val.csv", "test.csv"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(data.join("train.csv"))
        .unwrap()
        .starts_with("x0,x1,label\n"));

    ok(&imbforge(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]));
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 30);
    for line in history.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 3);
        for k in ["epoch", "train_loss", "val_top1"] {
            assert!(keys.contains(&k), "{line}");
        }
    }
    assert!(out.join("snapshots/generator_030.csv").is_file());
    assert!(out.join("snapshots/val_scm_001.csv").is_file());

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for k in [
        "top1",
        "top5",
        "minority_top1",
        "minority_classes",
        "epochs",
        "seed",
        "mode",
        "epsilon",
        "mu",
        "loss",
    ] {
        assert!(metrics.get(k).is_some(), "missing {k}");
    }
    assert_eq!(metrics["minority_classes"], serde_json::json!([2]));
    assert_eq!(metrics["mode"], "full");
    assert_eq!(metrics["loss"], "cross_entropy");
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["top5"], 1.0);

    ok(&imbforge(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]));
    let eval = fs::read_to_string(out.join("eval.json")).unwrap();
    assert_eq!(eval, fs::read_to_string(out.join("metrics.json")).unwrap());

    ok(&imbforge(&[
        "scm",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]));
    let scm = Matrix::load_csv(out.join("scm_test.csv")).unwrap();
    assert_eq!(scm.shape(), (3, 3));
    for r in scm.row_sums() {
        assert!((r - 1.0).abs() < 1e-9);
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}

#[test]
fn zero_epochs_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 0\nseed = 11\n");
    let out = dir.path().join("out");
    ok(&imbforge(&["train", "--config", &cfg, "--out", s(&out)]));
    let params = NetworkParams::load(out.join("checkpoint.eenn")).unwrap();
    assert_eq!(params, NetworkParams::init(&[2, 16, 3], 11, true).unwrap());
    assert_eq!(fs::read_to_string(out.join("history.jsonl")).unwrap(), "");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 0\nseed = 11\n");
    let out = dir.path().join("out");
    ok(&imbforge(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--seed",
        "5",
    ]));
    let params = NetworkParams::load(out.join("checkpoint.eenn")).unwrap();
    assert_eq!(params, NetworkParams::init(&[2, 16, 3], 5, true).unwrap());
}

#[test]
fn ablate_table_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{BLOBS}\nepochs = 3\n").replace("epochs = 30\n", ""),
    );
    let out = dir.path().join("out");
    ok(&imbforge(&["ablate", "--config", &cfg, "--out", s(&out)]));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mode,top1,minority");
    assert_eq!(lines.len(), 5);
    let modes: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        modes,
        ["baseline", "re_weighting", "cost_sensitive", "full"]
    );
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 3);
        for c in &cols[1..] {
            let v: f64 = c.parse().unwrap();
            assert!((0.0..=100.0).contains(&v));
        }
    }
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BLOBS.replace("epochs = 30", "epochs = 8"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&imbforge(&["train", "--config", &cfg, "--out", s(&a)]));
    ok(&imbforge(&["train", "--config", &cfg, "--out", s(&b)]));
    for f in [
        "metrics.json",
        "history.jsonl",
        "checkpoint.eenn",
        "snapshots/generator_008.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(imbforge(&["frobnicate"])), 2);

    let missing = dir.path().join("nope.toml");
    let o = imbforge(&["train", "--config", s(&missing), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
    assert_eq!(code(o), 4);

    let cfg = write_config(dir.path(), "epsilon = -1\n");
    let o = imbforge(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon"));
    assert_eq!(code(o), 3);

    let cfg = write_config(dir.path(), "colour = \"blue\"\n");
    let o = imbforge(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert_eq!(code(o), 3);

    let mnist = dir.path().join("mnist");
    fs::create_dir(&mnist).unwrap();
    for f in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        fs::write(mnist.join(f), [0u8, 0, 8, 3, 0, 0, 0, 0]).unwrap();
    }
    let cfg = write_config(
        dir.path(),
        "dataset = \"mnist\"\nlayer_sizes = [784, 128, 10]\nepochs = 1\n",
    );
    let o = imbforge(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(dir.path()),
        "--out",
        s(&out),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-images-idx3-ubyte"));
    assert_eq!(code(o), 5);

    let cfg = write_config(dir.path(), "epochs = 0\n");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("checkpoint.eenn"), b"not a checkpoint").unwrap();
    let o = imbforge(&["eval", "--config", &cfg, "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint.eenn"));
    assert_eq!(code(o), 6);

    let o = imbforge(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        s(&dir.path().join("empty")),
    ]);
    assert_eq!(code(o), 4);
}
