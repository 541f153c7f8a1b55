//! Exit-code and artifact contracts of the `styleconv` binary.
//!
//! Usage problems exit 2 (clap's convention), failed preconditions exit 1
//! with a diagnostic naming the missing piece, success exits 0 and leaves a
//! manifest behind. A micro corpus keeps the end-to-end chain under a few
//! seconds.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_styleconv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn styleconv")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["synth", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["--seed", "notanumber", "synth"])), 2);
    assert_eq!(code(&run(&[])), 2); // no subcommand
    // semantic flag validation follows the same convention
    let out = run(&["interpolate", "--mode", "sideways"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(&["interpolate", "--alphas", "0.1,zebra"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(&["characterize", "--class", "9"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn help_and_version_exit_0() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout).into_owned();
    for cmd in ["synth", "train-probe", "attack-table", "pipeline"] {
        assert!(text.contains(cmd), "help lost {cmd}:\n{text}");
    }
    let version = run(&["--version"]);
    assert_eq!(code(&version), 0);
    let text = String::from_utf8_lossy(&version.stdout).into_owned();
    assert!(text.contains("git"), "no build provenance in {text}");
}

#[test]
fn missing_artifacts_exit_1_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = out.to_str().unwrap();

    // no corpus yet
    let r = run(&["train", "--out", o]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("synth"), "stderr: {}", stderr(&r));

    // corpus but no model
    assert_eq!(code(&run(&["synth", "--out", o, "--n-images", "8", "--size", "24"])), 0);
    let r = run(&["convert", "--out", o]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("train"), "stderr: {}", stderr(&r));

    // corpus and model but no probe: the diagnostic must say a probe is required
    assert_eq!(code(&run(&["train", "--out", o, "--steps", "4"])), 0);
    let r = run(&["convert", "--out", o]);
    assert_eq!(code(&r), 1);
    assert!(
        stderr(&r).contains("probe required"),
        "stderr: {}",
        stderr(&r)
    );
}

#[test]
fn micro_end_to_end_leaves_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();

    assert_eq!(code(&run(&["synth", "--out", o, "--n-images", "8", "--size", "24"])), 0);
    assert_eq!(code(&run(&["train", "--out", o, "--steps", "8"])), 0);
    assert_eq!(code(&run(&["train-probe", "--out", o])), 0);
    let r = run(&["convert", "--out", o]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));

    for p in [
        "corpus/corpus.json",
        "models/gen.ckpt",
        "models/gen.history.csv",
        "probe/probe.json",
        "probe/fit.json",
        "experiment.json",
        "timing.json",
    ] {
        assert!(out.join(p).is_file(), "missing {p}");
    }

    // the manifest hashes every artifact except itself and the timing log
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("experiment.json")).unwrap())
            .unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.contains_key("models/gen.ckpt"));
    assert!(artifacts.contains_key("corpus/corpus.json"));
    assert!(!artifacts.contains_key("experiment.json"));
    assert!(!artifacts.contains_key("timing.json"));
    // conversion artifacts landed and were hashed
    assert!(artifacts.keys().any(|k| k.starts_with("convert/")));
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn out_dir_precedence_env_vs_flag() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");

    // env var alone picks the root
    let r = bin()
        .args(["synth", "--n-images", "8", "--size", "24"])
        .env("STYLECONV_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert!(env_out.join("corpus/corpus.json").is_file());

    // an explicit flag beats the env var
    let r = bin()
        .args([
            "synth",
            "--n-images",
            "8",
            "--size",
            "24",
            "--out",
            flag_out.to_str().unwrap(),
        ])
        .env("STYLECONV_OUT", dir.path().join("ignored"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert!(flag_out.join("corpus/corpus.json").is_file());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn config_file_layering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cfg_run");
    let cfg = dir.path().join("run.json");

    // unknown keys fail loudly
    std::fs::write(&cfg, r#"{"sede": 3}"#).unwrap();
    let r = run(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("sede"), "stderr: {}", stderr(&r));

    // config seed flows into the manifest; a flag overrides it
    std::fs::write(
        &cfg,
        format!(
            r#"{{"seed": 11, "out": "{}", "corpus": {{"n_images": 8, "image_size": 24}}}}"#,
            out.display()
        ),
    )
    .unwrap();
    let r = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("experiment.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["corpus"]["n_images"], 8);
    // derived component seeds are recorded, not left at their defaults
    assert_ne!(manifest["config"]["train"]["seed"], 0);

    let r = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(code(&r), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("experiment.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 12);
}

/// Same seed, same out path -> byte-identical corpus and manifest.
#[test]
fn synth_rerun_is_bitwise_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stable");
    let o = out.to_str().unwrap();
    let args = ["synth", "--out", o, "--n-images", "8", "--size", "24", "--seed", "3"];

    assert_eq!(code(&run(&args)), 0);
    let manifest_a = std::fs::read(out.join("experiment.json")).unwrap();
    let corpus_a = std::fs::read(out.join("corpus/corpus.json")).unwrap();

    assert_eq!(code(&run(&args)), 0);
    assert_eq!(std::fs::read(out.join("experiment.json")).unwrap(), manifest_a);
    assert_eq!(std::fs::read(out.join("corpus/corpus.json")).unwrap(), corpus_a);
}

/// `pick_sample` range failures are preconditions, not usage errors.
#[test]
fn out_of_range_sample_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("range");
    let o = out.to_str().unwrap();
    assert_eq!(code(&run(&["synth", "--out", o, "--n-images", "8", "--size", "24"])), 0);
    assert_eq!(code(&run(&["train", "--out", o, "--steps", "4"])), 0);
    assert_eq!(code(&run(&["train-probe", "--out", o])), 0);

    let r = run(&["convert", "--out", o, "--index", "999"]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("out of range"), "stderr: {}", stderr(&r));

    let r = run(&["convert", "--out", o, "--style", "plaid"]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("unknown style"), "stderr: {}", stderr(&r));
}
