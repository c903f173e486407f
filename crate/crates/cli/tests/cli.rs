use std::path::Path;
use std::process::{Command, Output};

use difftok_core::formats::{read_smel, read_tokens};

fn difftok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difftok"))
        .args(args)
        .output()
        .expect("spawn difftok")
}

fn ok(args: &[&str]) -> String {
    let out = difftok(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Exit code and the parsed single-line JSON error.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = difftok(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    (
        out.status.code().unwrap(),
        serde_json::from_str(stderr.trim()).unwrap(),
    )
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        ok(&["gen-corpus", "--out", p(&corpus), "--count", "2"]);
        let ckpt = dir.path().join("model.ckpt");
        ok(&[
            "train",
            "--data",
            p(&corpus),
            "--out",
            p(&ckpt),
            "--steps",
            "3",
            "--seed",
            "1",
        ]);
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn train_encode_decode_roundtrip() {
    let fx = Fixture::new();
    let (corpus, ckpt) = (fx.path("corpus"), fx.path("model.ckpt"));
    let metrics = std::fs::read_to_string(fx.path("model.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }

    let tokens = fx.path("tokens.txt");
    ok(&[
        "encode",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&corpus),
        "--out",
        p(&tokens),
    ]);
    let seqs = read_tokens(&tokens).unwrap();
    assert_eq!(seqs.len(), 2);

    let decode = |dir: &str, extra: &[&str]| {
        let out = fx.path(dir);
        let mut args = vec![
            "decode",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&tokens),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        seqs.iter()
            .map(|s| read_smel(&out.join(format!("{}.smel", s.id))).unwrap())
            .collect::<Vec<_>>()
    };
    let plain = decode("a", &["--steps", "16"]);
    let again = decode("b", &["--steps", "16", "--cfg-scale", "1.0"]);
    let guided = decode("c", &["--steps", "16", "--cfg-scale", "2.0"]);
    assert_eq!(plain, again);
    assert_ne!(plain, guided);
    for (seq, mel) in seqs.iter().zip(&plain) {
        // Stacked rows back to base frames, padding included.
        assert_eq!(mel.rows, seq.tokens.len() * 4);
        assert_eq!(mel.width, 16);
        assert_eq!(mel.stack, 1);
        assert!(mel.valid_len <= mel.rows);
    }

    let report = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&corpus),
        "--steps",
        "2",
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["mel_l1"].as_f64().unwrap() > 0.0);
    assert_eq!(v["utterances"].as_array().unwrap().len(), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let fx = Fixture::new();
    let corpus = fx.path("corpus");
    let (short, long, resumed) = (fx.path("s.ckpt"), fx.path("l.ckpt"), fx.path("r.ckpt"));
    let train = |out: &Path, steps: &str, from: Option<&Path>| {
        let mut args = vec![
            "train",
            "--data",
            p(&corpus),
            "--out",
            p(out),
            "--steps",
            steps,
        ];
        if let Some(c) = from {
            args.extend_from_slice(&["--ckpt", p(c)]);
        }
        ok(&args);
    };
    train(&short, "2", None);
    train(&resumed, "4", Some(&short));
    train(&long, "4", None);
    assert_eq!(
        std::fs::read(&resumed).unwrap(),
        std::fs::read(&long).unwrap()
    );
}

#[test]
fn fine_tuning_stages_run() {
    let fx = Fixture::new();
    let (corpus, ckpt) = (fx.path("corpus"), fx.path("model.ckpt"));
    let dec = fx.path("dec.ckpt");
    ok(&[
        "finetune-decoder",
        "--data",
        p(&corpus),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&dec),
        "--steps",
        "2",
    ]);
    let short = fx.path("short.ckpt");
    ok(&[
        "finetune-shortcut",
        "--data",
        p(&corpus),
        "--ckpt",
        p(&dec),
        "--out",
        p(&short),
        "--steps",
        "2",
    ]);
    let tokens = fx.path("t.txt");
    ok(&[
        "encode",
        "--ckpt",
        p(&short),
        "--data",
        p(&corpus),
        "--out",
        p(&tokens),
    ]);
    ok(&[
        "decode",
        "--ckpt",
        p(&short),
        "--data",
        p(&tokens),
        "--out",
        p(&fx.path("m")),
        "--steps",
        "2",
    ]);
    let (code, err) = failure(&[
        "finetune-shortcut",
        "--data",
        p(&corpus),
        "--out",
        p(&short),
    ]);
    assert_eq!((code, err["error"].as_str().unwrap()), (1, "usage"));
}

#[test]
fn errors_are_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = failure(&["train", "--bogus"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (1, "usage"));
    let (code, _) = failure(&["encode", "--data", "x.wav", "--out", "t.txt"]);
    assert_eq!(code, 1);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let (code, err) = failure(&[
        "decode",
        "--ckpt",
        p(&junk),
        "--data",
        "t.txt",
        "--out",
        "o",
    ]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "data"));
    assert!(err["message"].as_str().unwrap().contains("magic"));

    let corpus = dir.path().join("corpus");
    ok(&["gen-corpus", "--out", p(&corpus), "--count", "1"]);
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "train",
        "--data",
        p(&corpus),
        "--out",
        p(&ckpt),
        "--steps",
        "1",
    ]);
    let tokens = dir.path().join("bad.txt");
    std::fs::write(&tokens, "toy00000\tnot numbers\n").unwrap();
    let (code, err) = failure(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&tokens),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("bad.txt"));
}

#[test]
fn selfcheck_passes() {
    let out = ok(&["selfcheck"]);
    assert!(
        out.lines().filter(|l| l.starts_with("PASS")).count() >= 10,
        "{out}"
    );
    assert!(!out.contains("FAIL"));
}
