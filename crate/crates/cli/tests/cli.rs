use std::path::Path;
use std::process::{Command, Output};

use dualform::probes::{write_xtrc, XtrcTrace};
use ndarray::Array3;

fn dualform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualform"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = dualform(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fails(args: &[&str], code: i32, needle: &str) {
    let o = dualform(args);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(needle), "{args:?}: expected {needle:?} in {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Bytes of every regular file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_run(root: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let run = root.join(name);
    let mut args = vec!["train", "--out", s(&run), "--epochs", "1", "--precision", "f64"];
    args.extend_from_slice(extra);
    ok(&args);
    run
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--out", s(&a)]);
    let cfg = a.join("config.json");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let large = t.path().join("large");
    let out = ok(&["gen-data", "--profile", "adamw-large", "--out", s(&large)]);
    assert!(out.contains(" train / 200 validation"), "{out}");
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let t = tempfile::tempdir().unwrap();
    fails(&["train", "--bogus"], 2, "--bogus");
    fails(&["frobnicate"], 2, "frobnicate");
    fails(&["analyze", "norm", "--run", "x", "--exclude-last=maybe"], 2, "maybe");
    let missing = t.path().join("nope");
    fails(&["analyze", "norm", "--run", s(&missing)], 3, "not a run directory");
    fails(&["gen-data", "--config", s(&missing), "--out", s(t.path())], 3, "reading config");
    fails(&["train", "--profile", "huge", "--out", s(&missing)], 3, "unknown profile");
    fails(&["verify", "wobble"], 3, "unknown verifier");
    fails(&["verify", "duality"], 3, "needs --run");
    fails(&["import-trace", "--trace", s(&missing), "--out", s(t.path())], 3, "reading trace");
}

#[test]
fn train_verify_analyze_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let run = tiny_run(t.path(), "run", &[]);
    let before = snapshot(&run);

    let out = ok(&["verify", "duality", "--run", s(&run), "--out", s(&t.path().join("v"))]);
    assert!(out.lines().any(|l| l.starts_with("PASS duality W_LH max_abs_diff")), "{out}");
    assert!(t.path().join("v/duality.json").exists());
    // a zero tolerance cannot be met by accumulated rounding
    let o = dualform(&["verify", "duality", "--run", s(&run), "--tolerance", "0", "--out", s(&t.path().join("v0"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL duality"));

    fails(&["analyze", "colour", "--run", s(&run)], 3, "unknown analysis");
    fails(&["analyze", "norm", "--run", s(&run), "--epochs", "7"], 3, "no checkpoint for epoch 7");
    fails(&["verify", "dual-head", "--run", s(&run)], 3, "zero-initialized head");

    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        ok(&["analyze", "norm", "--run", s(&run), "--out", s(out), "--exclude-last=false"]);
        ok(&["analyze", "inner-loss", "--run", s(&run), "--out", s(out), "--epochs", "final"]);
        ok(&["analyze", "attn", "--run", s(&run), "--out", s(out), "--epochs", "final", "--threads", "2"]);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let csv = |snap: &[(String, Vec<u8>)]| snap.iter().filter(|(n, _)| n.ends_with(".csv")).cloned().collect::<Vec<_>>();
    assert_eq!(csv(&sa).len(), 3);
    assert_eq!(csv(&sa), csv(&sb));
    let norm = String::from_utf8(sa.iter().find(|(n, _)| n == "norm.csv").unwrap().1.clone()).unwrap();
    assert!(norm.contains("0,0,train,-,pair_pct,") && norm.contains("1,0,validation,-,sequence_pct,"));
    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("norm.config.json")).unwrap()).unwrap();
    assert_eq!(resolved["options"]["exclude_last"], false);
    assert_eq!(resolved["run_config"]["train"]["epochs"], 1);

    assert_eq!(before, snapshot(&run), "analyze/verify must not touch the run directory");
}

#[test]
fn config_mismatches_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    let run = tiny_run(t.path(), "run", &[]);
    fails(
        &["train", "--out", s(&run), "--epochs", "2", "--precision", "f64"],
        3,
        "different config",
    );
    let data = t.path().join("data");
    ok(&["gen-data", "--out", s(&data)]);
    let other = t.path().join("other");
    let ds = data.join("dataset.jsonl");
    fails(
        &["train", "--out", s(&other), "--epochs", "1", "--data-seed", "99", "--data", s(&ds)],
        3,
        "does not match",
    );
    // a history log from a differently configured model
    let zero = tiny_run(t.path(), "zero", &["--zero-init-head"]);
    std::fs::copy(zero.join("history.hlog"), run.join("history.hlog")).unwrap();
    fails(&["verify", "duality", "--run", s(&run)], 3, "config");
}

#[test]
fn interrupted_run_resumes_to_identical_state() {
    let t = tempfile::tempdir().unwrap();
    let full = t.path().join("full");
    let cut = t.path().join("cut");
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--out".into(),
            s(out).into(),
            "--epochs".into(),
            "3".into(),
            "--precision".into(),
            "f64".into(),
            "--checkpoint-every".into(),
            "1".into(),
        ]
    };
    let run_args = |out: &Path| {
        let a = args(out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run_args(&full);
    run_args(&cut);
    // roll the second run back to the end of epoch 1
    std::fs::copy(cut.join("checkpoints/epoch_0001.ckpt"), cut.join("last.ckpt")).unwrap();
    for e in [2, 3] {
        std::fs::remove_file(cut.join(format!("checkpoints/epoch_{e:04}.ckpt"))).unwrap();
    }
    let log = std::fs::read_to_string(cut.join("train_log.csv")).unwrap();
    let kept: Vec<&str> = log.lines().take(2).collect();
    std::fs::write(cut.join("train_log.csv"), kept.join("\n") + "\n").unwrap();
    run_args(&cut);
    assert_eq!(snapshot(&full), snapshot(&cut));
}

#[test]
fn import_trace_scores_monotone_samples() {
    let t = tempfile::tempdir().unwrap();
    let (n, points, dim) = (20, 12, 4);
    let data = Array3::from_shape_fn((n, points, dim), |(s, p, d)| ((p + 1) as f32) * (1.0 + 0.1 * (s + d) as f32));
    let trace = t.path().join("t.xtrc");
    write_xtrc(&trace, &XtrcTrace { data, labels: None }).unwrap();
    let out = t.path().join("imp");
    let text = ok(&["import-trace", "--trace", s(&trace), "--out", s(&out)]);
    assert!(text.contains("pair_pct: 100") && text.contains("sequence_pct: 100"), "{text}");
    assert!(out.join("import.csv").exists() && out.join("import.config.json").exists());
    fails(
        &["import-trace", "--trace", s(&trace), "--head", s(&trace), "--out", s(&out)],
        3,
        "labels",
    );
}
