use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nprobe"))
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .arg("--config")
        .arg(tiny_config())
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn probe_without_cache_is_a_config_error_naming_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["probe"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains("dataset.npd") || err.contains("cache.npfc"), "{err}");
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "unknown": 3}"#).unwrap();
    let out = bin().arg("--config").arg(&cfg).arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let missing = bin()
        .arg("--config")
        .arg(dir.path().join("none.json"))
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn bad_select_flags_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["select", "--checkpoints", "500"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["select", "--mode", "beam"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_chain_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    for stage in [
        "gen-data",
        "train-denoiser",
        "extract",
        "probe",
        "train-verifier",
        "select",
        "report",
    ] {
        let out = run(&[stage], &root);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(root.join(format!("manifests/{stage}.json")).exists());
    }
    let before = std::fs::read(root.join("selection/summary.json")).unwrap();
    let manifest = std::fs::read(root.join("manifests/select.json")).unwrap();
    let out = run(&["select"], &root);
    assert!(out.status.success());
    assert_eq!(std::fs::read(root.join("selection/summary.json")).unwrap(), before);
    assert_eq!(std::fs::read(root.join("manifests/select.json")).unwrap(), manifest);

    let out = run(&["select", "--mode", "baseline", "--prompts", "3"], &root);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(root.join("selection/costs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("baseline,3,"));
    assert!(root.join("report/probe_heatmap.svg").exists());
}
