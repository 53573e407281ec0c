use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "train_per_class=20\ntest_per_class=10\nepochs=2\npretrain_epochs=3\nwidths=4,8,8\nproj_hidden=8\nproj_dim=8\nqueue_capacity=32\nbank_capacity=auto\ngradcheck_instances=1\nbench_sizes=30,60\n";

fn tfda(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tfda"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "small.cfg"])
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = tfda(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Full pipeline in a fresh directory.
fn pipeline(seed: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data", "--seed", seed]);
    ok(d, &["pretrain", "--data", "data/source_train", "--out", "m.bin", "--seed", seed]);
    ok(
        d,
        &[
            "adapt", "--model", "m.bin", "--target", "data/target_train", "--out", "a.bin", "--report", "r.csv",
            "--eval", "data/target_test", "--seed", seed,
        ],
    );
    ok(d, &["export-embeddings", "--model", "a.bin", "--data", "data/target_test", "--out", "e.csv"]);
    let f1 = ok(d, &["eval", "--model", "a.bin", "--data", "data/target_test"]);
    (dir, f1)
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, fa) = pipeline("5");
    let (b, fb) = pipeline("5");
    assert_eq!(fa, fb);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs", pa.display());
    }
    let (c, _) = pipeline("6");
    assert_ne!(fs::read(a.path().join("a.bin")).unwrap(), fs::read(c.path().join("a.bin")).unwrap());
}

#[test]
fn eval_prints_six_decimals_and_report_has_fixed_header() {
    let (dir, f1) = pipeline("1");
    let line = f1.trim();
    let (_, frac) = line.split_once('.').unwrap();
    assert_eq!(frac.len(), 6, "{line}");
    let v: f64 = line.parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    let report = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), tfda::trainer::REPORT_HEADER);
    assert_eq!(report.lines().count(), 3);
    let emb = fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    assert!(header.starts_with("f0,") && header.ends_with(",predicted,domain"));
    assert_eq!(emb.lines().count(), 31);
    assert!(emb.lines().skip(1).all(|l| l.ends_with(",1")));
}

#[test]
fn zero_epoch_adapt_copies_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data"]);
    ok(d, &["pretrain", "--data", "data/source_train", "--out", "m.bin"]);
    fs::write(d.join("zero.cfg"), format!("{SMALL}epochs=0\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tfda"))
        .current_dir(d)
        .args(["adapt", "--model", "m.bin", "--target", "data/target_train", "--out", "z.bin", "--report", "z.csv"])
        .args(["--config", "zero.cfg"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(d.join("m.bin")).unwrap(), fs::read(d.join("z.bin")).unwrap());
}

#[test]
fn gradcheck_and_bench_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.lines().count() >= 30);
    assert!(out.lines().all(|l| l.ends_with(" ok")), "{out}");
    let bench = ok(dir.path(), &["bench"]);
    assert!(bench.starts_with("n,seconds,per_sample\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = tfda(d, &["nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(tfda(d, &["eval", "--model"]).status.code(), Some(1));
    assert_eq!(tfda(d, &["eval", "--model", "missing.bin", "--data", "missing"]).status.code(), Some(2));
    fs::write(d.join("bad.cfg"), "no_such_key=1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tfda"))
        .current_dir(d)
        .args(["gradcheck", "--config", "bad.cfg"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    ok(d, &["synth", "--out", "data"]);
    // Target training data is stored without labels, so it cannot be scored.
    ok(d, &["pretrain", "--data", "data/source_train", "--out", "m.bin"]);
    let o = tfda(d, &["eval", "--model", "m.bin", "--data", "data/target_train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = tfda(d, &["pretrain", "--data", "data/target_train", "--out", "x.bin"]);
    assert_eq!(o.status.code(), Some(2));
}
