use std::path::Path;
use std::process::{Command, Output};

fn astroseq(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astroseq")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stderr_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stderr).lines().map(str::to_string).collect()
}

const TINY_RUN: &str = r#"
seed = 3
[task]
kind = "copy"
total_len = 16
n_train = 16
n_val = 8
[model]
seg_len = 8
n_segments = 2
vocab_size = 26
[train]
epochs = 1
batch_size = 8
[retention]
schedule = "uniform"
"#;

#[test]
fn simulate_writes_trace_and_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = astroseq(&["simulate", "--cycles", "3", "--cycle-seconds", "2", "--stride", "5", "--out", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(csv.starts_with("time,s_0_0,"));
    // 3 cycles of 50 steps at stride 5, plus the initial sample.
    assert_eq!(csv.lines().count(), 1 + 1 + 30);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.boundaries.json")).unwrap()).unwrap();
    assert_eq!(sidecar["cycle_boundaries"].as_array().unwrap().len(), 3);
    assert_eq!(sidecar["boundary_mean_p_l"].as_array().unwrap().len(), 4);
}

#[test]
fn retention_prints_a_normalised_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = astroseq(&["retention", "--segments", "4"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let schedule: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let factors: Vec<f64> = schedule["factors"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(factors.len(), 4);
    assert!((factors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = astroseq(&["gradcheck", "--segments", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("vs bptt"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY_RUN).unwrap();
    let out = astroseq(&["--config", "run.toml", "--out-dir", "run", "train", "--quiet"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epochs"], 1);
    assert!(dir.path().join("run/model.ckpt").exists());

    let out = astroseq(&["--out-dir", "run", "eval"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_input_exits_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nd = 0\n").unwrap();
    std::fs::write(dir.path().join("unknown.toml"), "[model]\nwidth = 3\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["simulate", "--dt", "-1"],
        &["retention", "--segments", "0"],
        &["--config", "bad.toml", "gradcheck"],
        &["--config", "unknown.toml", "gradcheck"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = astroseq(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let lines = stderr_lines(&out);
        assert_eq!(lines.len(), 1, "{args:?}: {lines:?}");
        assert!(lines[0].starts_with("astroseq: "));
    }
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("hot.txt"), format!("c = {:e}\n", f64::MAX)).unwrap();
    let out = astroseq(&["simulate", "--params", "hot.txt", "--cycles", "1", "--cycle-seconds", "8"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let lines = stderr_lines(&out);
    assert_eq!(lines.len(), 1, "{lines:?}");
    assert!(lines[0].contains("non-finite") || lines[0].contains("overflow"), "{lines:?}");
}

#[test]
fn missing_checkpoint_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = astroseq(&["eval", "--checkpoint", "absent.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_lines(&out).len(), 1);
}
