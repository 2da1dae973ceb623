use std::path::Path;
use std::process::{Command, Output};

fn motility(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motility"))
        .args(args)
        .output()
        .expect("run motility")
}

fn small_config(dir: &Path, seed: u64, order: usize, length: usize) -> String {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = {seed}\nworkers = 1\n\n[synth]\ndims = [30, 16, 64, 64]\nhelical = 3\nerratic_semicircular = 3\ncorkscrew_linear = 3\n\n[track]\ntarget_length = {length}\nmin_length = {length}\n\n[model]\norder = {order}\n"
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bad_flags_and_config_keys_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        motility(&["cluster", "--out", out, "--k", "many"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        motility(&["pipeline", "--out", out, "--beta", "-1"])
            .status
            .code(),
        Some(2)
    );
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[cluster]\ngamma = 2\n").unwrap();
    let o = motility(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
}

#[test]
fn missing_or_corrupt_inputs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(
        motility(&["featurize", "--out", out]).status.code(),
        Some(3)
    );
    let bogus = dir.path().join("bogus.raw");
    std::fs::write(&bogus, b"not a volume").unwrap();
    let o = motility(&["track", "--input", bogus.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn an_empty_corpus_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0, 3, 30);
    let out = dir.path().to_str().unwrap();
    let o = motility(&["pipeline", "--config", &cfg, "--out", out, "--length", "45"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn singular_gramians_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3, 5, 28);
    let o = motility(&[
        "pipeline",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn synth_is_byte_identical_on_repeat() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let cfg = small_config(dir.path(), 7, 3, 30);
        let o = motility(&[
            "synth",
            "--config",
            &cfg,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for f in ["volume.raw", "ground_truth.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn stages_run_one_after_another() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0, 3, 30);
    let out = dir.path().to_str().unwrap();
    for stage in ["synth", "track", "featurize", "cluster"] {
        let o = motility(&[stage, "--config", &cfg, "--out", out]);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let report = String::from_utf8_lossy(
        &motility(&["cluster", "--config", &cfg, "--out", out, "--k", "2"]).stdout,
    )
    .to_string();
    assert!(report.contains("k = 2"), "{report}");
    let labels = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert!(labels.starts_with("trajectory_id,label\n"));
    assert_eq!(labels.lines().count(), 10);
    assert!(dir.path().join("manifest.json").exists());
}
