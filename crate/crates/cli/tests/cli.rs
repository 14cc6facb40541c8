use std::path::Path;
use std::process::{Command, Output};

use llqrsam_cli::{ExperimentConfig, ExperimentTag};

fn llqrsam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llqrsam")).args(args).current_dir(cwd).output().expect("spawn llqrsam")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_manifest_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "w.toml", "experiment = \"whitening-check\"\nseed = 3\n[whitening]\ninstances = 4\n");
    for out in ["a", "b"] {
        let o = llqrsam(&["run", &cfg, "--out", out], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["manifest.json", "whitening.csv", "config.resolved.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "whitening-check");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "w.toml", "experiment = \"whitening-check\"\nseed = 3\n[whitening]\ninstances = 2\n");
    let o = llqrsam(&["run", &cfg, "--out", "o", "--seed", "8"], tmp.path());
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 8);
}

#[test]
fn bad_configs_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("missing_seed.toml", "experiment = \"noise-toy\"\n"),
        ("unknown_tag.toml", "experiment = \"nope\"\nseed = 1\n"),
        ("unknown_key.toml", "experiment = \"whitening-check\"\nseed = 1\nbogus = 2\n"),
        ("foreign_section.toml", "experiment = \"whitening-check\"\nseed = 1\n[damping]\neta = 0.5\n"),
        ("bad_start.toml", "experiment = \"escape-toy\"\nseed = 1\n[[variants]]\nrule = \"sam\"\n[run]\nstart = [1.0, 2.0, 3.0]\n"),
    ];
    for (name, body) in cases {
        let cfg = write(tmp.path(), name, body);
        let o = llqrsam(&["run", &cfg, "--out", "x"], tmp.path());
        assert_eq!(o.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!tmp.path().join("x").exists(), "{name} wrote artifacts");
    }
    let o = llqrsam(&["run", "does-not-exist.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_rejects_unknown_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = llqrsam(&["verify", "--only", "13"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn list_names_every_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = llqrsam(&["list"], tmp.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for tag in ExperimentTag::ALL {
        assert!(text.contains(tag.as_str()), "{tag}");
    }
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen.push(cfg.experiment);
    }
    for tag in ExperimentTag::ALL {
        assert!(seen.contains(&tag), "no config for {tag}");
    }
}
