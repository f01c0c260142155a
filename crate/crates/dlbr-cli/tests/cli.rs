//! End-to-end tests that drive the `dlbr` binary as a subprocess.
//!
//! Golden files under `tests/data/` pin the container bytes and the inspect
//! output for the sample net; regenerate them with `BLESS=1 cargo test -p
//! dlbr-cli` after intentional format changes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn workdir(test: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dlbr-cli-{}-{}", test, std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dlbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlbr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Quantize the sample net deterministically into `dir` and return the
/// container path.
fn quantize_sample(dir: &Path) -> PathBuf {
    let model = dir.join("model.dlbr");
    let out = dlbr(&[
        "quantize",
        data("net.txt").to_str().unwrap(),
        "--bits",
        "2A/3W",
        "--keep-fraction",
        "0.25",
        "--seed",
        "0",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    model
}

#[test]
fn quantize_writes_container_and_report() {
    let dir = workdir("quantize");
    let model = dir.join("model.dlbr");
    let report = dir.join("report.json");
    let out = dlbr(&[
        "quantize",
        data("net.txt").to_str().unwrap(),
        "--bits",
        "2A/2W",
        "--out",
        model.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("c1"), "missing layer table:\n{}", text);
    assert!(text.contains("bytes stored"), "missing size line:\n{}", text);

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["bits"], "2A/2W");
    assert_eq!(json["layers"].as_array().unwrap().len(), 7);
    let ratio = json["compression_ratio"].as_f64().unwrap();
    let fp32 = json["fp32_bytes"].as_u64().unwrap();
    let stored = json["stored_bytes"].as_u64().unwrap();
    assert!((ratio - fp32 as f64 / stored as f64).abs() < 1e-9);
    assert!(std::fs::metadata(&model).unwrap().len() > 0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn golden_container_and_inspect_are_stable() {
    let dir = workdir("golden");
    let model = quantize_sample(&dir);
    let bytes = std::fs::read(&model).unwrap();

    let inspect = dlbr(&["inspect", model.to_str().unwrap()]);
    assert_exit(&inspect, 0);
    let text = stdout_of(&inspect);

    let golden_model = data("sample.dlbr");
    let golden_text = data("sample_inspect.txt");
    if std::env::var_os("BLESS").is_some() {
        std::fs::write(&golden_model, &bytes).unwrap();
        std::fs::write(&golden_text, &text).unwrap();
    }
    assert_eq!(
        bytes,
        std::fs::read(&golden_model).expect("golden container; bless with BLESS=1"),
        "container bytes drifted from tests/data/sample.dlbr"
    );
    assert_eq!(
        text,
        std::fs::read_to_string(&golden_text).expect("golden inspect text"),
        "inspect output drifted from tests/data/sample_inspect.txt"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_produces_output_tensor() {
    let dir = workdir("run");
    let model = quantize_sample(&dir);
    let y_path = dir.join("y.tns");
    let out = dlbr(&[
        "run",
        model.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        y_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(stdout_of(&out).contains("output shape [1, 6]"));

    // the written tensor is readable and matches the declared shape:
    // TNSR magic, rank 2, extents 1 and 6, then 6 f32 values
    let y = std::fs::read(&y_path).unwrap();
    assert_eq!(&y[0..4], b"TNSR");
    assert_eq!(u32::from_le_bytes(y[4..8].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(y[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(y[12..16].try_into().unwrap()), 6);
    assert_eq!(y.len(), 16 + 6 * 4);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_accepts_input_file_and_workers() {
    let dir = workdir("run-input");
    let model = quantize_sample(&dir);
    let x_path = dir.join("x.tns");
    // batch of 2: rank 4, [2,3,8,8]
    let mut x = Vec::new();
    x.extend_from_slice(b"TNSR");
    x.extend_from_slice(&4u32.to_le_bytes());
    for d in [2u32, 3, 8, 8] {
        x.extend_from_slice(&d.to_le_bytes());
    }
    for i in 0..(2 * 3 * 8 * 8) {
        x.extend_from_slice(&((i % 7) as f32 * 0.1 - 0.3).to_le_bytes());
    }
    std::fs::write(&x_path, &x).unwrap();

    let out = dlbr(&[
        "run",
        model.to_str().unwrap(),
        "--input",
        x_path.to_str().unwrap(),
        "--workers",
        "4",
    ]);
    assert_exit(&out, 0);
    assert!(stdout_of(&out).contains("output shape [2, 6]"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn verify_passes_and_reports_error_level() {
    let dir = workdir("verify");
    let model = quantize_sample(&dir);
    let report = dir.join("verify.json");
    let out = dlbr(&[
        "verify",
        model.to_str().unwrap(),
        "--trials",
        "5",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("max relative error"), "missing error line:\n{}", text);
    assert!(text.contains("verification passed"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    assert_eq!(json["trials"], 5);
    std::fs::remove_dir_all(&dir).ok();
}

// An impossibly tight tolerance turns the runtime's benign float drift
// against the simulation into a failure, exercising the dedicated exit code.
#[test]
fn verify_tolerance_failure_exits_4() {
    let dir = workdir("verify-fail");
    let model = quantize_sample(&dir);
    let out = dlbr(&[
        "verify",
        model.to_str().unwrap(),
        "--trials",
        "5",
        "--tolerance",
        "1e-12",
    ]);
    assert_exit(&out, 4);
    assert!(stdout_of(&out).contains("verification FAILED"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_reports_latency_and_breakdown() {
    let dir = workdir("bench");
    let model = quantize_sample(&dir);
    let report = dir.join("bench.json");
    let out = dlbr(&[
        "bench",
        model.to_str().unwrap(),
        "--iters",
        "3",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("latency over 3 iters"));
    assert!(text.contains("popcount backend:"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["stats"]["mean_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(json["stats"]["iters"], 3);
    assert!(!json["stats"]["per_op"].as_array().unwrap().is_empty());
    std::fs::remove_dir_all(&dir).ok();
}

// The size accounting for a 256-in/256-out 3x3 conv at 2 bits: 147456
// packed bytes + 1024 scale bytes vs 2359296 FP32 bytes, a 15.89x ratio.
#[test]
fn quantize_prints_expected_compression_for_wide_conv() {
    let out = dlbr(&[
        "quantize",
        data("wide.txt").to_str().unwrap(),
        "--bits",
        "2A/2W",
    ]);
    assert_exit(&out, 0);
    let text = stdout_of(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("weights:"))
        .expect("size line");
    assert!(
        line.contains("2359296 bytes fp32 -> 148480 bytes stored"),
        "unexpected accounting: {}",
        line
    );
    let ratio: f64 = line
        .split('(')
        .nth(1)
        .and_then(|s| s.strip_suffix("x)"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((15.39..=16.39).contains(&ratio), "ratio {} out of range", ratio);
}

#[test]
fn error_exit_codes_are_distinct() {
    let dir = workdir("errors");

    // missing file: io
    let out = dlbr(&["inspect", dir.join("absent.dlbr").to_str().unwrap()]);
    assert_exit(&out, 5);

    // truncated container: decode error
    let model = quantize_sample(&dir);
    let bytes = std::fs::read(&model).unwrap();
    let cut = dir.join("cut.dlbr");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = dlbr(&["inspect", cut.to_str().unwrap()]);
    assert_exit(&out, 3);

    // malformed bits grammar: argument parse error
    let out = dlbr(&["quantize", data("net.txt").to_str().unwrap(), "--bits", "4A/2W"]);
    assert_exit(&out, 2);
    let out = dlbr(&["quantize", data("net.txt").to_str().unwrap(), "--bits", "2W/2A"]);
    assert_exit(&out, 2);

    // FP32 mixed with low-bit: config error
    let out = dlbr(&["quantize", data("net.txt").to_str().unwrap(), "--bits", "32A/2W"]);
    assert_exit(&out, 3);

    // keep fraction out of range: config error
    let out = dlbr(&[
        "quantize",
        data("net.txt").to_str().unwrap(),
        "--bits",
        "2A/2W",
        "--keep-fraction",
        "2.0",
    ]);
    assert_exit(&out, 3);

    // broken description: parse error with a position
    let bad = dir.join("bad.txt");
    std::fs::write(&bad, "input 1 4 4\nconv c1 filters=zzz kernel=3\n").unwrap();
    let out = dlbr(&["run", bad.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn fp32_passthrough_keeps_model_unquantized() {
    let dir = workdir("fp32");
    let model = dir.join("fp32.dlbr");
    let out = dlbr(&[
        "quantize",
        data("net.txt").to_str().unwrap(),
        "--bits",
        "32A/32W",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let inspect = dlbr(&["inspect", model.to_str().unwrap()]);
    assert_exit(&inspect, 0);
    let text = stdout_of(&inspect);
    assert!(text.contains("fp32"));
    assert!(!text.contains("A/"), "no quantized rows expected:\n{}", text);
    std::fs::remove_dir_all(&dir).ok();
}
