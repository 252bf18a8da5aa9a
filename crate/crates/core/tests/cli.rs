//! End-to-end checks of the `dgp` binary: episode directories round trip
//! through the tensor container, exit codes separate bad input from
//! numerical failure, and the file outputs keep their schemas.

use std::path::Path;
use std::process::{Command, Output};

use dgp_core::{save_tensor, DenseTensor};

fn dgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgp"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_f32(path: &Path, shape: Vec<usize>, data: Vec<f32>) {
    save_tensor(&DenseTensor::from_f32(shape, data).unwrap(), path).unwrap();
}

fn write_f64(path: &Path, shape: Vec<usize>, data: Vec<f64>) {
    save_tensor(&DenseTensor::from_f64(shape, data).unwrap(), path).unwrap();
}

/// One-level episode on a 64x64 mask with a 16x16 feature grid (stride 4):
/// the left mask half is foreground and the single feature dimension is +3
/// there, -3 elsewhere, so the posterior sign separates the halves.
fn write_split_episode(dir: &Path, feature_value: impl Fn(usize, usize) -> f64) {
    let mask: Vec<f32> = (0..64 * 64)
        .map(|i| if i % 64 < 32 { 1.0 } else { 0.0 })
        .collect();
    let feats: Vec<f64> = (0..16)
        .flat_map(|r| (0..16).map(move |c| (r, c)))
        .map(|(r, c)| feature_value(r, c))
        .collect();
    write_f32(&dir.join("mask_q.dgpt"), vec![64, 64], mask.clone());
    write_f64(&dir.join("feat_q_l0.dgpt"), vec![16, 16, 1], feats.clone());
    write_f32(&dir.join("mask_s0.dgpt"), vec![64, 64], mask);
    write_f64(&dir.join("feat_s0_l0.dgpt"), vec![16, 16, 1], feats);
}

fn split_features(_r: usize, c: usize) -> f64 {
    if c < 8 {
        3.0
    } else {
        -3.0
    }
}

#[test]
fn run_reports_episode_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_split_episode(dir.path(), split_features);
    let out_dir = dir.path().join("out");
    let out = dgp(&[
        "run",
        dir.path().to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-zmaps",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let line: serde_json::Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line["shots"], 1);
    assert_eq!(line["levels"], 1);
    assert_eq!(line["strides"], serde_json::json!([4]));
    assert!(line["iou"].as_f64().unwrap() >= 0.8, "iou: {}", line["iou"]);
    assert_eq!(
        line["true_foreground"].as_u64().unwrap(),
        64 * 32,
        "query mask is half foreground"
    );

    let pred = dgp_core::load_tensor(out_dir.join("pred_mask.dgpt")).unwrap();
    assert_eq!(pred.shape(), &[64, 64]);
    let fused = dgp_core::load_tensor(out_dir.join("fused.dgpt")).unwrap();
    assert_eq!(fused.shape(), &[64, 64]);
    let mu = dgp_core::load_tensor(out_dir.join("z_mu_l0.dgpt")).unwrap();
    assert_eq!(mu.shape(), &[16, 16, 1]);
    let sigma = dgp_core::load_tensor(out_dir.join("z_sigma_l0.dgpt")).unwrap();
    assert_eq!(sigma.shape(), &[16, 16, 25]);
}

#[test]
fn run_names_the_missing_support_file() {
    let dir = tempfile::tempdir().unwrap();
    write_split_episode(dir.path(), split_features);
    std::fs::remove_file(dir.path().join("feat_s0_l0.dgpt")).unwrap();
    let out = dgp(&["run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("feat_s0_l0.dgpt"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn run_rejects_non_binary_mask_values() {
    let dir = tempfile::tempdir().unwrap();
    write_split_episode(dir.path(), split_features);
    write_f32(&dir.path().join("mask_q.dgpt"), vec![64, 64], vec![0.5; 64 * 64]);
    let out = dgp(&["run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("mask_q.dgpt"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn run_rejects_stride_flag_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_split_episode(dir.path(), split_features);
    let out = dgp(&["run", dir.path().to_str().unwrap(), "--strides", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("strides"), "stderr: {}", stderr(&out));
}

#[test]
fn run_maps_singular_system_to_runtime_exit() {
    let dir = tempfile::tempdir().unwrap();
    // All-zero features with the linear kernel and zero noise give an
    // all-zero Gram that no jitter can rescue.
    write_split_episode(dir.path(), |_, _| 0.0);
    let out = dgp(&[
        "run",
        dir.path().to_str().unwrap(),
        "--kernel",
        "linear",
        "--noise-sq",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("positive definite"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn sweep_emits_schema_and_repeats_byte_identically() {
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = dgp(&[
            "sweep",
            "--shots",
            "1,2",
            "--episodes",
            "6",
            "--seed",
            "97",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("k=1 mean_miou="));
        csvs.push(std::fs::read_to_string(dir.path().join("kshot.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let lines: Vec<&str> = csvs[0].lines().collect();
    assert_eq!(lines[0], "k,mean_miou,std");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn bench_emits_schema_and_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dgp(&[
        "bench",
        "--shots",
        "1,2",
        "--episodes",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(
        stdout(&out).contains("fit scaling exponent:"),
        "stdout: {}",
        stdout(&out)
    );
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "phase,s,mean_ms,std_ms");
    // Five pipeline stages at each of the two support sizes.
    assert_eq!(lines.len(), 11);
    assert_eq!(csv.matches(",256,").count(), 5);
    assert_eq!(csv.matches(",512,").count(), 5);
}

#[test]
fn selftest_passes_clean_and_fails_under_injection() {
    let clean = dgp(&["selftest"]);
    assert!(clean.status.success(), "stderr: {}", stderr(&clean));
    assert_eq!(stdout(&clean).matches("[PASS]").count(), 3);

    let injected = dgp(&["selftest", "--inject-tolerance-error", "1e-3"]);
    assert_eq!(injected.status.code(), Some(1));
    assert_eq!(stdout(&injected).matches("[FAIL]").count(), 3);
}

#[test]
fn dump_prints_shape_dtype_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dgpt");
    write_f64(&path, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = dgp(&["dump", path.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["shape: [2, 3]", "dtype: f64", "min: 1.000000", "max: 6.000000"] {
        assert!(text.contains(needle), "missing {needle:?} in: {text}");
    }
}

#[test]
fn dump_rejects_missing_file() {
    let out = dgp(&["dump", "/nonexistent/t.dgpt"]);
    assert_eq!(out.status.code(), Some(2));
}
