// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnrules(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnrules"))
        .args(args)
        .env("ATTNRULES_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "[run]\ndir = \"{}\"\nseed = 3\n\n[synth]\nskipgram = 2\nabsence = 1\n\n[corpus]\nn_sequences = 1200\n",
        dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn full_run_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    for stage in ["synth", "extract", "eval"] {
        let o = attnrules(&[stage, "--config", &config]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = attnrules(&["eval", "--config", &config, "--eval.top_n", "[1, 2]"]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 6, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("L0H0.")));

    let o = attnrules(&["intervene", "--config", &config, "--intervene.feature=L0H0.2", "--intervene.max_repeats=3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 4);

    let o = attnrules(&["verify", "--config", &config]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("ok: "));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    // Unknown key, missing model, bad head.
    assert_eq!(code(&attnrules(&["synth", "--config", &config, "--synth.bogus", "1"])), 2);
    assert_eq!(code(&attnrules(&["synth", "--config", &config, "--run.head", "H0"])), 2);
    assert_eq!(code(&attnrules(&["synth", "--run.dir", "x"])), 2);
    assert_eq!(code(&attnrules(&["synth", "--config", "/nonexistent.toml"])), 2);
    // Nothing to extract from yet.
    assert_eq!(code(&attnrules(&["extract", "--config", &config])), 3);
    // No manifest, then a tampered artifact.
    assert_eq!(code(&attnrules(&["verify", "--config", &config])), 4);
    assert_eq!(code(&attnrules(&["synth", "--config", &config, "--corpus.n_sequences", "30"])), 0);
    fs::write(tmp.path().join("run/plants.json"), "{}").unwrap();
    let o = attnrules(&["verify", "--config", &config]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("plants.json"));
}

#[test]
fn overrides_beat_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let other = tmp.path().join("elsewhere");
    let o = attnrules(&[
        "synth",
        "--config",
        &config,
        "--run.dir",
        other.to_str().unwrap(),
        "--corpus.n_sequences=25",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!tmp.path().join("run").exists());
    assert_eq!(fs::read_to_string(other.join("corpus.txt")).unwrap().lines().count(), 25);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(other.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["run"]["seed"], 3);
    assert_eq!(manifest["config"]["corpus"]["n_sequences"], 25);
}
