//! Execution engine: compiles a model into a flat sequence of kernel ops
//! with reusable intermediate buffers, then runs it on FP32 inputs.
//!
//! Every inter-layer edge carries FP32 values. Quantized layers requantize
//! their input with the activation scale calibrated at quantize time, run
//! the bitserial kernel, and rescale the integer accumulator back to FP32.
//! Plans are compiled for batch 1; buffers scale with the input batch at
//! run time.

use crate::bitserial::{self, make_tile_plan, PackedWeights, TilePlan};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerParams, Model};
use crate::ops;
use crate::quant;
use crate::sim;
use crate::tensor::{Layout, Tensor};
use serde::Serialize;
use std::fmt;
use std::time::{Duration, Instant};

const L1_TILE_BYTES: usize = 32 * 1024;

/// Kernel selected for one compiled op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Kernel {
    ConvF32,
    DenseF32,
    Relu,
    MaxPool2d,
    Add,
    ConvBitserial { fuse_relu: bool, plan: TilePlan },
    DenseBitserial { plan: TilePlan },
}

impl Kernel {
    pub fn is_bitserial(&self) -> bool {
        matches!(
            self,
            Kernel::ConvBitserial { .. } | Kernel::DenseBitserial { .. }
        )
    }
}

/// One executable step. `inputs` and `output` are edge ids; edge 0 is the
/// network input, edge i+1 the output of graph layer i (a relu fused into
/// a conv shares the conv's edge).
#[derive(Debug, Clone)]
pub struct CompiledOp {
    pub layer: usize,
    pub label: String,
    pub kernel: Kernel,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub out_shape: Vec<usize>,
}

/// Compiled form of a model: op sequence, edge metadata, and the greedy
/// buffer coloring. Borrows the model for its weights.
pub struct ExecutionPlan<'m> {
    pub model: &'m Model,
    pub ops: Vec<CompiledOp>,
    pub workers: usize,
    edge_shapes: Vec<Vec<usize>>,
    /// buffer id per edge; edge 0 reads the caller's tensor directly
    edge_buffer: Vec<Option<usize>>,
    /// per-batch-element capacity of each buffer
    buffer_elems: Vec<usize>,
    output_edge: usize,
}

impl ExecutionPlan<'_> {
    pub fn buffer_count(&self) -> usize {
        self.buffer_elems.len()
    }

    pub fn buffer_of_edge(&self, edge: usize) -> Option<usize> {
        self.edge_buffer[edge]
    }

    pub fn edge_count(&self) -> usize {
        self.edge_shapes.len()
    }
}

fn elems_per_batch(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn layout_for(shape: &[usize]) -> Layout {
    if shape.len() == 4 {
        Layout::Nchw
    } else {
        Layout::RowMajor2d
    }
}

fn tile_plan_for(
    out_rows: usize,
    patches: usize,
    k_words: usize,
    workers: usize,
) -> Result<TilePlan> {
    make_tile_plan(out_rows, patches, k_words, workers, L1_TILE_BYTES)
}

/// Compile a model for execution with `workers` gemm threads.
pub fn compile(model: &Model, workers: usize) -> Result<ExecutionPlan<'_>> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    model.check()?;
    let shapes = model.graph.infer_shapes(1)?;
    let layers = &model.graph.layers;

    // A relu directly after a quantized conv folds into the conv kernel
    // unless a skip connection needs the conv's pre-relu output.
    let mut fused = vec![false; layers.len()];
    for i in 0..layers.len() {
        let quantized_conv = matches!(layers[i].kind, LayerKind::Conv2d { .. })
            && model.params[i].is_quantized();
        let next_is_relu = layers
            .get(i + 1)
            .is_some_and(|l| matches!(l.kind, LayerKind::Relu));
        let pre_relu_needed = layers
            .iter()
            .any(|l| matches!(&l.kind, LayerKind::Add { with } if *with == layers[i].id));
        if quantized_conv && next_is_relu && !pre_relu_needed {
            fused[i + 1] = true;
        }
    }

    let mut ops = Vec::new();
    let mut edge_shapes = vec![{
        let (c, h, w) = model.graph.input;
        vec![1, c, h, w]
    }];
    let mut edge_of_layer = vec![0usize; layers.len()];
    for (i, layer) in layers.iter().enumerate() {
        let prev_edge = if i == 0 { 0 } else { edge_of_layer[i - 1] };
        if fused[i] {
            edge_of_layer[i] = prev_edge;
            continue;
        }
        let out_shape = shapes[i].clone();
        let mut inputs = vec![prev_edge];
        let kernel = match (&layer.kind, &model.params[i]) {
            (LayerKind::Conv2d { params, .. }, LayerParams::Quantized { packed, .. }) => {
                let (oh, ow) = {
                    let in_shape = &edge_shapes[prev_edge];
                    params.out_dims(in_shape[2], in_shape[3])?
                };
                Kernel::ConvBitserial {
                    fuse_relu: fused.get(i + 1).copied().unwrap_or(false),
                    plan: tile_plan_for(packed.rows(), oh * ow, packed.words_per_row(), workers)?,
                }
            }
            (LayerKind::Conv2d { .. }, _) => Kernel::ConvF32,
            (LayerKind::Dense { .. }, LayerParams::Quantized { packed, .. }) => {
                Kernel::DenseBitserial {
                    plan: tile_plan_for(packed.rows(), 1, packed.words_per_row(), workers)?,
                }
            }
            (LayerKind::Dense { .. }, _) => Kernel::DenseF32,
            (LayerKind::Relu, _) => Kernel::Relu,
            (LayerKind::MaxPool2d { .. }, _) => Kernel::MaxPool2d,
            (LayerKind::Add { with }, _) => {
                let other = model.graph.layer_index(with).expect("checked by validate");
                inputs.push(edge_of_layer[other]);
                Kernel::Add
            }
        };
        let label = match &kernel {
            Kernel::ConvBitserial { fuse_relu, .. } => format!(
                "{} {} {}{}",
                layer.id,
                layer.kind.op_name(),
                model.precision_label(i),
                if *fuse_relu { "+relu" } else { "" }
            ),
            Kernel::DenseBitserial { .. } => format!(
                "{} {} {}",
                layer.id,
                layer.kind.op_name(),
                model.precision_label(i)
            ),
            _ => format!("{} {}", layer.id, layer.kind.op_name()),
        };
        let edge = edge_shapes.len();
        edge_shapes.push(out_shape.clone());
        edge_of_layer[i] = edge;
        ops.push(CompiledOp {
            layer: i,
            label,
            kernel,
            inputs,
            output: edge,
            out_shape,
        });
    }
    let output_edge = *edge_of_layer.last().expect("graph is non-empty");

    let edge_buffer = color_buffers(&ops, edge_shapes.len(), output_edge);
    let mut buffer_elems = Vec::new();
    for (edge, &buffer) in edge_buffer.iter().enumerate() {
        if let Some(b) = buffer {
            if b >= buffer_elems.len() {
                buffer_elems.resize(b + 1, 0);
            }
            buffer_elems[b] = buffer_elems[b].max(elems_per_batch(&edge_shapes[edge]));
        }
    }

    Ok(ExecutionPlan {
        model,
        ops,
        workers,
        edge_shapes,
        edge_buffer,
        buffer_elems,
        output_edge,
    })
}

/// Greedy interval coloring over edge live ranges: walk ops in order,
/// release buffers whose edge saw its last use before this step, and give
/// each newly defined edge the lowest-numbered free buffer.
fn color_buffers(ops: &[CompiledOp], edges: usize, output_edge: usize) -> Vec<Option<usize>> {
    let mut last_use = vec![0usize; edges];
    for (t, op) in ops.iter().enumerate() {
        for &e in &op.inputs {
            last_use[e] = last_use[e].max(t);
        }
    }
    last_use[output_edge] = ops.len();

    let mut assignment: Vec<Option<usize>> = vec![None; edges];
    let mut free: Vec<usize> = Vec::new();
    let mut next = 0usize;
    let mut held: Vec<(usize, usize)> = Vec::new(); // (last_use, buffer)
    for (t, op) in ops.iter().enumerate() {
        held.retain(|&(until, buffer)| {
            if until < t {
                free.push(buffer);
                false
            } else {
                true
            }
        });
        free.sort_unstable();
        let buffer = if free.is_empty() {
            next += 1;
            next - 1
        } else {
            free.remove(0)
        };
        assignment[op.output] = Some(buffer);
        held.push((last_use[op.output], buffer));
    }
    assignment
}

fn shape_with_batch(shape: &[usize], batch: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] = batch;
    s
}

fn exec_op(
    plan: &ExecutionPlan<'_>,
    op: &CompiledOp,
    batch: usize,
    input: &Tensor,
    buffers: &[Vec<f32>],
) -> Result<Tensor> {
    let fetch = |edge: usize| -> Result<Tensor> {
        if edge == 0 {
            return Ok(input.clone());
        }
        let shape = shape_with_batch(&plan.edge_shapes[edge], batch);
        let len: usize = shape.iter().product();
        let buffer = plan.edge_buffer[edge].expect("non-input edges are buffered");
        Tensor::from_vec(&shape, layout_for(&shape), buffers[buffer][..len].to_vec())
    };
    let x = fetch(op.inputs[0])?;
    let params = &plan.model.params[op.layer];
    match (&op.kernel, &plan.model.graph.layers[op.layer].kind, params) {
        (Kernel::ConvF32, LayerKind::Conv2d { params: cp, .. }, LayerParams::Fp32 { weight, bias }) => {
            ops::conv2d_f32(&x, weight, bias.as_deref(), cp)
        }
        (
            Kernel::ConvBitserial { fuse_relu, plan: tp },
            LayerKind::Conv2d { params: cp, .. },
            LayerParams::Quantized { packed, scales, bias, a_quant },
        ) => {
            let codes = quant::quantize(&x, a_quant)?;
            let weights = PackedWeights {
                planes: packed,
                scales,
                bias: bias.as_deref(),
            };
            bitserial::conv2d_bitserial(
                &codes,
                a_quant.bits,
                a_quant.scale,
                weights,
                cp,
                *fuse_relu,
                tp,
            )
        }
        (Kernel::DenseF32, LayerKind::Dense { .. }, LayerParams::Fp32 { weight, bias }) => {
            ops::dense_f32(&sim::flatten2(&x)?, weight, bias.as_deref())
        }
        (
            Kernel::DenseBitserial { plan: tp },
            LayerKind::Dense { .. },
            LayerParams::Quantized { packed, scales, bias, a_quant },
        ) => {
            let codes = quant::quantize(&sim::flatten2(&x)?, a_quant)?;
            let weights = PackedWeights {
                planes: packed,
                scales,
                bias: bias.as_deref(),
            };
            bitserial::dense_bitserial(&codes, a_quant.bits, a_quant.scale, weights, tp)
        }
        (Kernel::Relu, ..) => Ok(ops::relu(&x)),
        (Kernel::MaxPool2d, LayerKind::MaxPool2d { window, stride }, _) => {
            ops::maxpool2d(&x, *window, *stride)
        }
        (Kernel::Add, ..) => ops::add_f32(&x, &fetch(op.inputs[1])?),
        _ => Err(Error::Config(format!(
            "kernel {:?} does not match layer '{}'",
            op.kernel, plan.model.graph.layers[op.layer].id
        ))),
    }
}

fn check_input(plan: &ExecutionPlan<'_>, input: &Tensor) -> Result<usize> {
    let (n, c, h, w) = input.dims4()?;
    if (c, h, w) != plan.model.graph.input {
        return Err(Error::Shape(format!(
            "input is {}x{}x{} per batch element, network expects {}x{}x{}",
            c, h, w, plan.model.graph.input.0, plan.model.graph.input.1, plan.model.graph.input.2
        )));
    }
    Ok(n)
}

fn run_inner(
    plan: &ExecutionPlan<'_>,
    input: &Tensor,
    mut on_op: impl FnMut(usize, Duration),
) -> Result<Tensor> {
    let batch = check_input(plan, input)?;
    let mut buffers: Vec<Vec<f32>> = plan
        .buffer_elems
        .iter()
        .map(|&elems| vec![0.0; elems * batch])
        .collect();
    for (t, op) in plan.ops.iter().enumerate() {
        let started = Instant::now();
        let out = exec_op(plan, op, batch, input, &buffers)?;
        let buffer = plan.edge_buffer[op.output].expect("op outputs are buffered");
        buffers[buffer][..out.len()].copy_from_slice(out.data());
        on_op(t, started.elapsed());
    }
    let shape = shape_with_batch(&plan.edge_shapes[plan.output_edge], batch);
    let len: usize = shape.iter().product();
    let buffer = plan.edge_buffer[plan.output_edge].expect("output edge is buffered");
    Tensor::from_vec(&shape, layout_for(&shape), buffers[buffer][..len].to_vec())
}

/// Execute the plan on a batch of inputs.
pub fn run(plan: &ExecutionPlan<'_>, input: &Tensor) -> Result<Tensor> {
    run_inner(plan, input, |_, _| {})
}

/// Execute and report the wall time of each op, aligned with `plan.ops`.
pub fn run_timed(plan: &ExecutionPlan<'_>, input: &Tensor) -> Result<(Tensor, Vec<Duration>)> {
    let mut timings = vec![Duration::ZERO; plan.ops.len()];
    let out = run_inner(plan, input, |t, d| timings[t] = d)?;
    Ok((out, timings))
}

/// Latency summary from repeated runs of a plan.
#[derive(Debug, Clone, Serialize)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    /// mean per-op wall time, in op order
    pub per_op: Vec<(String, f64)>,
    pub model_bytes: u64,
    pub iters: usize,
    pub workers: usize,
}

impl fmt::Display for BenchStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "latency over {} iters ({} workers): mean {:.3} ms, p50 {:.3} ms, p90 {:.3} ms",
            self.iters, self.workers, self.mean_ms, self.p50_ms, self.p90_ms
        )?;
        writeln!(f, "model size: {} bytes", self.model_bytes)?;
        let width = self.per_op.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        for (label, ms) in &self.per_op {
            writeln!(f, "  {:width$}  {:>9.3} ms", label, ms, width = width)?;
        }
        Ok(())
    }
}

fn nearest_rank(sorted_ms: &[f64], q: f64) -> f64 {
    let rank = (q * sorted_ms.len() as f64).ceil().max(1.0) as usize;
    sorted_ms[rank.min(sorted_ms.len()) - 1]
}

/// Run the plan `warmup + iters` times and summarize the timed iterations.
pub fn benchmark(
    plan: &ExecutionPlan<'_>,
    input: &Tensor,
    warmup: usize,
    iters: usize,
) -> Result<BenchStats> {
    if iters == 0 {
        return Err(Error::Config("benchmark needs at least one iteration".into()));
    }
    for _ in 0..warmup {
        run(plan, input)?;
    }
    let mut totals_ms = Vec::with_capacity(iters);
    let mut op_ms = vec![0.0f64; plan.ops.len()];
    for _ in 0..iters {
        let started = Instant::now();
        let (_, timings) = run_timed(plan, input)?;
        totals_ms.push(started.elapsed().as_secs_f64() * 1e3);
        for (acc, d) in op_ms.iter_mut().zip(&timings) {
            *acc += d.as_secs_f64() * 1e3;
        }
    }
    let mean_ms = totals_ms.iter().sum::<f64>() / iters as f64;
    let mut sorted = totals_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let per_op = plan
        .ops
        .iter()
        .zip(&op_ms)
        .map(|(op, &ms)| (op.label.clone(), ms / iters as f64))
        .collect();
    Ok(BenchStats {
        mean_ms,
        p50_ms: nearest_rank(&sorted, 0.50),
        p90_ms: nearest_rank(&sorted, 0.90),
        per_op,
        model_bytes: crate::container::save_bytes(plan.model)?.len() as u64,
        iters,
        workers: plan.workers,
    })
}
