use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("bench runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("bad.json"), r#"{"sim": {"augment": {"mismatch_fraktion": 0.1}}}"#);
    let o = bench(&["run", "--config", &cfg, "--controller", "pbvs"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.augment"), "{}", stderr(&o));

    let cfg = write(&dir.path().join("range.json"), r#"{"sim": {"augment": {"mismatch_fraction": 1.5}}}"#);
    let o = bench(&["run", "--config", &cfg, "--controller", "pbvs"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mismatch_fraction"));

    let o = bench(&["run", "--controller", "cns"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"));

    let o = bench(&["run", "--controller", "pbvs", "--seed-range", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = bench(&["run", "--config", missing.to_str().unwrap(), "--controller", "pbvs"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bench(&["export", "--input", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trajectories.jsonl"));
}

#[test]
fn run_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), r#"{"max_steps": 200, "trajectory_stride": 20}"#);
    let out = dir.path().join("res");
    let o = bench(&["run", "--config", &cfg, "--controller", "pbvs", "--seed-range", "0..3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("episodes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    for f in ["summary.json", "timing.csv", "timing.json", "trajectories.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let plots = dir.path().join("plots");
    let o = bench(&["export", "--input", out.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(plots.join("rotation_error.svg")).unwrap();
    assert!(svg.contains("pbvs seed 2"));
}

#[test]
fn ablation_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), r#"{"max_steps": 50}"#);
    let out = dir.path().join("abl");
    let o = bench(&[
        "ablate", "--config", &cfg, "--controller", "ibvs", "--seed-range", "0..2", "--axis", "mismatch", "--values",
        "0,0.2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(out.join("0.2").join("episodes.csv").exists());
}
