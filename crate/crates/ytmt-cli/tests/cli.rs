//! Binary-level contract tests: exit codes, artifact layout, output-root
//! resolution, and the effective-config echo round-trip. Everything here is
//! tiny-scale (seconds); training-quality properties live in the acceptance
//! suite.

use std::path::Path;
use std::process::{Command, Output};

fn ytmt() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ytmt"));
    c.env_remove("YTMT_OUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    ytmt().args(args).output().expect("spawn ytmt")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny training flags shared by the round-trip tests: depth-1 width-4 net,
/// 8 samples of 16×16, 4 iterations.
const TINY: &[&str] = &[
    "--seed", "5", "--iterations", "4", "--batch-size", "2", "--depth", "1",
    "--base-channels", "4", "--data-count", "8", "--data-crop", "16",
    "--test-count", "2",
];

#[test]
fn usage_errors_exit_1() {
    let bogus = run(&["train", "--no-such-flag"]);
    assert_eq!(bogus.status.code(), Some(1), "unknown flag: {}", stderr(&bogus));

    let variant = run(&["train", "--variant", "XYZ", "--dry-run"]);
    assert_eq!(variant.status.code(), Some(1), "bad variant: {}", stderr(&variant));
    assert!(stderr(&variant).contains("XYZ"), "names the offending value");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[run]\nnot_a_key = 1\n").unwrap();
    let unknown = run(&["--config", cfg.to_str().unwrap(), "train", "--dry-run"]);
    assert_eq!(unknown.status.code(), Some(1), "unknown key: {}", stderr(&unknown));
    assert!(stderr(&unknown).contains("not_a_key"), "names the unknown key");
}

#[test]
fn data_errors_exit_2() {
    let missing = run(&["eval", "--checkpoint", "/nonexistent/final.ckpt"]);
    assert_eq!(missing.status.code(), Some(2), "missing ckpt: {}", stderr(&missing));

    let dir = tempfile::tempdir().unwrap();
    let void = dir.path().join("void");
    let no_corpus = ytmt()
        .args(["train", "--iterations", "0", "--depth", "1", "--base-channels", "4"])
        .args(["--data-source", void.to_str().unwrap()])
        .args(["--out-dir", dir.path().join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(no_corpus.status.code(), Some(2), "absent corpus: {}", stderr(&no_corpus));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn gen_data_layout_and_checksum_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let gen = |out: &Path| {
        let o = run(&[
            "gen-data", "--seed", "9", "--data-count", "3", "--data-crop", "16",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let (sa, sb) = (gen(&out_a), gen(&out_b));
    for sub in ["T", "R", "I"] {
        assert!(out_a.join(sub).join("0000.ppm").exists(), "{sub}/0000.ppm");
        assert!(out_a.join(sub).join("0002.ppm").exists(), "{sub}/0002.ppm");
    }
    let sha = |s: &str| -> String {
        s.lines().find(|l| l.contains("first-sample sha256:")).expect("checksum line").into()
    };
    assert_eq!(sha(&sa), sha(&sb), "same seed ⇒ same corpus checksum");
}

#[test]
fn train_separate_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let train = ytmt()
        .args(["train", "--variant", "UAS", "--out-dir", out.to_str().unwrap()])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.exists() && out.join("curve.csv").exists() && out.join("eval.csv").exists());

    // A mixture to separate: synthesize a matching corpus and use one I file.
    let corpus = dir.path().join("corpus");
    let gen = run(&[
        "gen-data", "--seed", "5", "--data-count", "2", "--data-crop", "16",
        "--out", corpus.to_str().unwrap(),
    ]);
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    // Applying a checkpoint requires the matching architecture flags; the
    // compatibility check compares them against the embedded echo.
    let sep_out = dir.path().join("sep");
    let sep = ytmt()
        .args(["separate", "--variant", "UAS", "--checkpoint", ckpt.to_str().unwrap()])
        .args(["--input", corpus.join("I").join("0001.ppm").to_str().unwrap()])
        .args(["--out", sep_out.to_str().unwrap()])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(sep.status.code(), Some(0), "{}", stderr(&sep));
    for suffix in ["T", "R", "residual"] {
        assert!(sep_out.join(format!("0001.{suffix}.ppm")).exists(), "0001.{suffix}.ppm");
    }
    assert!(stdout(&sep).contains("mean additivity residual"));

    let csv = dir.path().join("metrics.csv");
    let eval = ytmt()
        .args(["eval", "--checkpoint", ckpt.to_str().unwrap()])
        .args(["--out-csv", csv.to_str().unwrap()])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("index,psnr_t,ssim_t,psnr_r,ssim_r"), "header: {rows}");
    assert_eq!(rows.trim_end().lines().count(), 3, "2 test samples + header: {rows}");

    // Architecture drift must be rejected as a data error with both lines named.
    let drift = ytmt()
        .args(["eval", "--checkpoint", ckpt.to_str().unwrap(), "--depth", "2"])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(drift.status.code(), Some(2), "{}", stderr(&drift));
    assert!(stderr(&drift).contains("depth"), "diff names the field: {}", stderr(&drift));
}

#[test]
fn out_root_reroots_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("rooted");
    let o = ytmt()
        .env("YTMT_OUT_ROOT", &root)
        .args(["gen-data", "--seed", "3", "--data-count", "1", "--data-crop", "16"])
        .args(["--out", "rel/corpus"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("rel/corpus/T/0000.ppm").exists(), "rerooted under YTMT_OUT_ROOT");
}

#[test]
fn effective_config_echo_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let echo_of = |extra: &[&str]| -> String {
        let mut args = vec!["train", "--dry-run"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = stdout(&o);
        let mut lines = text.lines().skip_while(|l| !l.starts_with("# effective configuration"));
        lines.next();
        lines
            .take_while(|l| l.starts_with('#'))
            .map(|l| l.trim_start_matches("# ").trim_start_matches('#'))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let first = echo_of(&["--variant", "UAS", "--seed", "17", "--base-channels", "6"]);
    let cfg = dir.path().join("echo.toml");
    std::fs::write(&cfg, &first).unwrap();
    let second = echo_of(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(first, second, "echo fed back as config reproduces itself");
}
