//! Layer-by-layer execution of a model with the scalar reference ops.
//!
//! Two modes share one walker: a pure FP32 pass, and a fake-quantized pass
//! where low-bit layers see quantize-dequantize'd activations and
//! code-exact dequantized weights. The latter defines the numbers the
//! bitserial runtime must reproduce.

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerParams, Model};
use crate::ops;
use crate::quant::fake_quantize;
use crate::tensor::{Layout, Tensor};

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Fp32,
    FakeQuant,
}

/// Reshape to `[n, k]` for dense layers; 4-D NCHW flattens row-major.
pub fn flatten2(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [_, _] => Ok(t.clone()),
        [n, c, h, w] => Tensor::from_vec(&[n, c * h * w], Layout::RowMajor2d, t.data().to_vec()),
        ref other => Err(Error::Shape(format!(
            "dense input must be 2-D or 4-D, got {:?}",
            other
        ))),
    }
}

fn check_input(model: &Model, input: &Tensor) -> Result<()> {
    let (_, c, h, w) = input.dims4()?;
    if (c, h, w) != model.graph.input {
        return Err(Error::Shape(format!(
            "input is {}x{}x{} per image, graph expects {}x{}x{}",
            c, h, w, model.graph.input.0, model.graph.input.1, model.graph.input.2
        )));
    }
    Ok(())
}

fn forward_inner(
    model: &Model,
    input: &Tensor,
    mode: Mode,
    collect: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    check_input(model, input)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.graph.layers.len());
    let mut captured: Vec<Tensor> = Vec::new();
    let mut cur = input.clone();
    for (i, layer) in model.graph.layers.iter().enumerate() {
        if collect {
            captured.push(cur.clone());
        }
        let a_quant = match (&model.params[i], mode) {
            (LayerParams::Quantized { a_quant, .. }, Mode::FakeQuant) => Some(*a_quant),
            _ => None,
        };
        let next = match &layer.kind {
            LayerKind::Conv2d { params, .. } => {
                let w = model.weight_tensor(i)?;
                let x = match &a_quant {
                    Some(q) => fake_quantize(&cur, q)?,
                    None => cur.clone(),
                };
                ops::conv2d_f32(&x, &w, model.bias_of(i), params)?
            }
            LayerKind::Dense { .. } => {
                let w = model.weight_tensor(i)?;
                let flat = flatten2(&cur)?;
                let x = match &a_quant {
                    Some(q) => fake_quantize(&flat, q)?,
                    None => flat,
                };
                ops::dense_f32(&x, &w, model.bias_of(i))?
            }
            LayerKind::Relu => ops::relu(&cur),
            LayerKind::MaxPool2d { window, stride } => ops::maxpool2d(&cur, *window, *stride)?,
            LayerKind::Add { with } => {
                let j = model
                    .graph
                    .layer_index(with)
                    .ok_or_else(|| Error::Topology(format!("unknown add operand '{}'", with)))?;
                ops::add_f32(&cur, &outputs[j])?
            }
        };
        outputs.push(next.clone());
        cur = next;
    }
    Ok((cur, captured))
}

/// Pure FP32 forward pass. Quantized layers run their dequantized weights
/// with no activation quantization.
pub fn forward_fp32(model: &Model, input: &Tensor) -> Result<Tensor> {
    forward_inner(model, input, Mode::Fp32, false).map(|(out, _)| out)
}

/// FP32 forward pass that also returns each layer's input activation, in
/// layer order. Used to calibrate activation quantizers.
pub fn forward_fp32_trace(model: &Model, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    forward_inner(model, input, Mode::Fp32, true)
}

/// Fake-quantized simulation: the oracle the bitserial runtime must match.
pub fn simulate(model: &Model, input: &Tensor) -> Result<Tensor> {
    forward_inner(model, input, Mode::FakeQuant, false).map(|(out, _)| out)
}
