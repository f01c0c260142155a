//! `dlbr`: quantize networks to 1-3 bit weights/activations, run them with
//! bitserial kernels, and inspect or benchmark the resulting containers.
//!
//! Exit codes: 0 success, 2 argument or description parse errors, 3 shape,
//! config, or container decode errors, 4 verification tolerance exceeded,
//! 5 I/O errors.

use clap::{Parser, Subcommand};
use dlbr_core::container;
use dlbr_core::graph::{LayerParams, Model};
use dlbr_core::netdesc;
use dlbr_core::precision::{self, LayerPrecision, PrecisionPlan};
use dlbr_core::runtime;
use dlbr_core::sim;
use dlbr_core::tensor::max_rel_error;
use dlbr_core::{Error, Fill, Layout, Tensor};
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

/// Precision request in the form `<a>A/<w>W`, e.g. `2A/3W` or `32A/32W`.
#[derive(Clone, Copy, Debug)]
struct BitsSpec {
    a: u8,
    w: u8,
}

impl BitsSpec {
    fn is_fp32(&self) -> bool {
        self.a == 32
    }
}

impl fmt::Display for BitsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}A/{}W", self.a, self.w)
    }
}

impl FromStr for BitsSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse_part = |part: &str, suffix: char| -> Result<u8, String> {
            let digits = part
                .strip_suffix(suffix)
                .ok_or_else(|| format!("expected '<bits>{0}' in '<a>A/<w>W', got '{1}'", suffix, part))?;
            let v: u8 = digits
                .parse()
                .map_err(|_| format!("'{}' is not a bit width", digits))?;
            if ![1, 2, 3, 32].contains(&v) {
                return Err(format!("bit width must be 1, 2, 3, or 32, got {}", v));
            }
            Ok(v)
        };
        let (a_part, w_part) = s
            .split_once('/')
            .ok_or_else(|| format!("expected '<a>A/<w>W', e.g. 2A/2W, got '{}'", s))?;
        Ok(BitsSpec {
            a: parse_part(a_part, 'A')?,
            w: parse_part(w_part, 'W')?,
        })
    }
}

#[derive(Parser)]
#[command(name = "dlbr", version, about = "Bitserial quantized inference tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate and quantize a network, writing a model container
    Quantize {
        /// network description (.txt) or FP32 model container (.dlbr)
        model: PathBuf,
        /// precision, e.g. 2A/2W, 1A/3W, or 32A/32W for no quantization
        #[arg(long)]
        bits: BitsSpec,
        /// calibration tensor file; a seeded input is generated if omitted
        #[arg(long)]
        calib: Option<PathBuf>,
        /// fraction of quantizable layers kept in FP32, most sensitive first
        #[arg(long, default_value_t = 0.0)]
        keep_fraction: f32,
        /// seed for generated calibration data
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// where to write the quantized container
        #[arg(long)]
        out: Option<PathBuf>,
        /// write a JSON report of the plan and sizes
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a model on an input tensor
    Run {
        model: PathBuf,
        /// input tensor file ([N,C,H,W]); a seeded input is generated if omitted
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// where to write the output tensor
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the runtime against the reference simulation on seeded inputs
    Verify {
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// maximum allowed relative error (absolute errors under 1e-5 pass)
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f32,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure latency and report a per-op breakdown
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a model's layers, shapes, precisions, and sizes
    Inspect { model: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e {
                Error::Parse { .. } => 2,
                Error::Io(_) => 5,
                _ => 3,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Quantize { model, bits, calib, keep_fraction, seed, out, report } => {
            cmd_quantize(&model, bits, calib.as_deref(), keep_fraction, seed, out.as_deref(), report.as_deref())
        }
        Command::Run { model, input, seed, workers, out } => {
            cmd_run(&model, input.as_deref(), seed, workers, out.as_deref())
        }
        Command::Verify { model, trials, seed, workers, tolerance, report } => {
            cmd_verify(&model, trials, seed, workers, tolerance, report.as_deref())
        }
        Command::Bench { model, iters, workers, input, seed, report } => {
            cmd_bench(&model, iters, workers, input.as_deref(), seed, report.as_deref())
        }
        Command::Inspect { model } => cmd_inspect(&model),
    }
}

/// Containers are recognized by magic; anything else parses as a network
/// description.
fn load_model(path: &Path) -> Result<Model, Error> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && bytes[0..4] == container::MAGIC {
        container::load_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            line: 1,
            col: 1,
            msg: format!("{} is neither a model container nor text", path.display()),
        })?;
        let desc = netdesc::parse(&text)?;
        netdesc::build_model(&desc, path.parent().unwrap_or(Path::new(".")))
    }
}

fn seeded_input(model: &Model, seed: u64) -> Result<Tensor, Error> {
    let (c, h, w) = model.graph.input;
    Tensor::new(
        &[1, c, h, w],
        Layout::Nchw,
        Fill::Uniform { lo: -1.0, hi: 1.0, seed },
    )
}

fn load_or_seed_input(path: Option<&Path>, model: &Model, seed: u64) -> Result<Tensor, Error> {
    match path {
        Some(p) => container::read_tensor(p),
        None => seeded_input(model, seed),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn dims_of(shape: &[usize]) -> String {
    shape[1..]
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

// ── quantize ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct LayerReport {
    id: String,
    op: String,
    precision: String,
    sensitivity: Option<f32>,
}

#[derive(Serialize)]
struct QuantizeReport {
    bits: String,
    keep_fraction: f32,
    layers: Vec<LayerReport>,
    fp32_bytes: u64,
    stored_bytes: u64,
    compression_ratio: f64,
}

fn all_fp32_plan(model: &Model) -> PrecisionPlan {
    PrecisionPlan {
        assignment: model
            .graph
            .layers
            .iter()
            .map(|l| (l.id.clone(), LayerPrecision::Fp32))
            .collect(),
        sensitivity: Default::default(),
    }
}

fn cmd_quantize(
    model_path: &Path,
    bits: BitsSpec,
    calib: Option<&Path>,
    keep_fraction: f32,
    seed: u64,
    out: Option<&Path>,
    report: Option<&Path>,
) -> Result<ExitCode, Error> {
    if (bits.a == 32) != (bits.w == 32) {
        return Err(Error::Config(format!(
            "mixed FP32 and low-bit precision {} is not supported; use 32A/32W or 1-3 bits on both sides",
            bits
        )));
    }
    let model = load_model(model_path)?;
    let calib = load_or_seed_input(calib, &model, seed)?;
    let (plan, quantized) = if bits.is_fp32() {
        (all_fp32_plan(&model), model)
    } else {
        precision::plan_and_quantize(&model, &calib, bits.a, bits.w, keep_fraction)?
    };

    let mut layers = Vec::new();
    println!("{:<10} {:<10} {:<10} {}", "layer", "op", "precision", "sensitivity");
    for (i, layer) in quantized.graph.layers.iter().enumerate() {
        let sens = plan.sensitivity.get(&layer.id).copied();
        let label = quantized.precision_label(i);
        println!(
            "{:<10} {:<10} {:<10} {}",
            layer.id,
            layer.kind.op_name(),
            label,
            sens.map_or(String::from("-"), |s| format!("{:.3e}", s)),
        );
        layers.push(LayerReport {
            id: layer.id.clone(),
            op: layer.kind.op_name().to_string(),
            precision: label,
            sensitivity: sens,
        });
    }
    let (fp32_bytes, stored_bytes) = quantized.weight_bytes();
    let ratio = fp32_bytes as f64 / stored_bytes.max(1) as f64;
    println!(
        "weights: {} bytes fp32 -> {} bytes stored ({:.2}x)",
        fp32_bytes, stored_bytes, ratio
    );

    if let Some(path) = out {
        container::save_file(&quantized, path)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = report {
        write_json(
            path,
            &QuantizeReport {
                bits: bits.to_string(),
                keep_fraction,
                layers,
                fp32_bytes,
                stored_bytes,
                compression_ratio: ratio,
            },
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── run ────────────────────────────────────────────────────────────────────

fn cmd_run(
    model_path: &Path,
    input: Option<&Path>,
    seed: u64,
    workers: usize,
    out: Option<&Path>,
) -> Result<ExitCode, Error> {
    let model = load_model(model_path)?;
    let x = load_or_seed_input(input, &model, seed)?;
    let plan = runtime::compile(&model, workers)?;
    let y = runtime::run(&plan, &x)?;
    let (min, max, sum) = y.data().iter().fold(
        (f32::INFINITY, f32::NEG_INFINITY, 0f64),
        |(lo, hi, s), &v| (lo.min(v), hi.max(v), s + v as f64),
    );
    println!(
        "output shape [{}], min {:.6}, max {:.6}, mean {:.6}",
        y.shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", "),
        min,
        max,
        sum / y.len() as f64
    );
    if let Some(path) = out {
        container::write_tensor(path, &y)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ── verify ─────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct VerifyReport {
    trials: usize,
    tolerance: f32,
    max_rel_error: f32,
    pass: bool,
}

fn cmd_verify(
    model_path: &Path,
    trials: usize,
    seed: u64,
    workers: usize,
    tolerance: f32,
    report: Option<&Path>,
) -> Result<ExitCode, Error> {
    if trials == 0 {
        return Err(Error::Config("verification needs at least one trial".into()));
    }
    let model = load_model(model_path)?;
    let plan = runtime::compile(&model, workers)?;
    let mut worst = 0f32;
    for t in 0..trials {
        let x = seeded_input(&model, seed.wrapping_add(t as u64))?;
        let fast = runtime::run(&plan, &x)?;
        let reference = sim::simulate(&model, &x)?;
        // floor 1e-2 admits absolute errors up to tolerance/100 (1e-5 at
        // the default tolerance) on near-zero outputs
        let (err, _) = max_rel_error(&fast, &reference, 1e-2)?;
        worst = worst.max(err);
    }
    let pass = worst <= tolerance;
    println!(
        "max relative error over {} trials: {:.3e} (tolerance {:.0e})",
        trials, worst, tolerance
    );
    println!("verification {}", if pass { "passed" } else { "FAILED" });
    if let Some(path) = report {
        write_json(
            path,
            &VerifyReport {
                trials,
                tolerance,
                max_rel_error: worst,
                pass,
            },
        )?;
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

// ── bench ──────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct BenchReport {
    backend: &'static str,
    stats: runtime::BenchStats,
}

fn cmd_bench(
    model_path: &Path,
    iters: usize,
    workers: usize,
    input: Option<&Path>,
    seed: u64,
    report: Option<&Path>,
) -> Result<ExitCode, Error> {
    let model = load_model(model_path)?;
    let x = load_or_seed_input(input, &model, seed)?;
    let plan = runtime::compile(&model, workers)?;
    let warmup = (iters / 10).max(1);
    let stats = runtime::benchmark(&plan, &x, warmup, iters)?;
    println!("popcount backend: {}", dlbr_core::bitserial::backend_name());
    print!("{}", stats);
    if let Some(path) = report {
        write_json(
            path,
            &BenchReport {
                backend: dlbr_core::bitserial::backend_name(),
                stats,
            },
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── inspect ────────────────────────────────────────────────────────────────

fn layer_stored_bytes(params: &LayerParams) -> Option<u64> {
    match params {
        LayerParams::None => None,
        LayerParams::Fp32 { weight, bias } => Some(
            4 * (weight.len() + bias.as_ref().map_or(0, Vec::len)) as u64,
        ),
        LayerParams::Quantized { packed, scales, bias, .. } => Some(
            packed.byte_len() as u64
                + 4 * (scales.len() + bias.as_ref().map_or(0, Vec::len)) as u64,
        ),
    }
}

fn cmd_inspect(model_path: &Path) -> Result<ExitCode, Error> {
    let model = load_model(model_path)?;
    let shapes = model.graph.infer_shapes(1)?;
    let (c, h, w) = model.graph.input;
    println!("input: {}x{}x{}", c, h, w);
    println!(
        "{:<10} {:<10} {:<12} {:<10} {:>12}",
        "layer", "op", "output", "precision", "stored"
    );
    for (i, layer) in model.graph.layers.iter().enumerate() {
        let stored = layer_stored_bytes(&model.params[i]);
        println!(
            "{:<10} {:<10} {:<12} {:<10} {:>12}",
            layer.id,
            layer.kind.op_name(),
            dims_of(&shapes[i]),
            if stored.is_some() { model.precision_label(i) } else { "-".into() },
            stored.map_or(String::from("-"), |b| format!("{} B", b)),
        );
    }
    let (fp32_bytes, stored_bytes) = model.weight_bytes();
    println!(
        "weights: {} bytes fp32 -> {} bytes stored ({:.2}x)",
        fp32_bytes,
        stored_bytes,
        fp32_bytes as f64 / stored_bytes.max(1) as f64
    );
    Ok(ExitCode::SUCCESS)
}
