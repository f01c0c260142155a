//! Mixed-precision policy: rank layers by quantization sensitivity, keep the
//! most sensitive fraction in FP32, and apply the resulting plan to produce
//! a quantized model.
//!
//! Sensitivity of a layer is the mean squared error between the network's
//! FP32 output and its output with that layer alone quantized (weights
//! per-channel, input activation with a scale fitted on the calibration
//! activation), everything else untouched.

use crate::bitpack::pack_bitplanes;
use crate::error::{Error, Result};
use crate::graph::{LayerParams, Model};
use crate::quant;
use crate::sim;
use crate::tensor::{IntTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPrecision {
    Fp32,
    Quantized { a_bits: u8, w_bits: u8 },
}

/// Outcome of planning: one precision per layer id, plus the sensitivity
/// score of every quantizable layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub assignment: BTreeMap<String, LayerPrecision>,
    pub sensitivity: BTreeMap<String, f32>,
}

fn check_bits(bits: u8, what: &str) -> Result<()> {
    if !(1..=3).contains(&bits) {
        return Err(Error::Config(format!(
            "{} bits must be in [1,3], got {}",
            what, bits
        )));
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> f32 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    (sum / a.len() as f64) as f32
}

/// Quantize one conv/dense layer of an FP32 model: per-channel fitted weight
/// scales packed into bitplanes, activation scale fitted on the calibration
/// activation that fed this layer.
pub fn quantize_layer(
    model: &Model,
    index: usize,
    a_bits: u8,
    w_bits: u8,
    activation: &Tensor,
) -> Result<LayerParams> {
    check_bits(a_bits, "activation")?;
    check_bits(w_bits, "weight")?;
    let weight = model.weight_tensor(index)?;
    let wq = quant::fit_scale_per_channel(&weight, w_bits, true)?;
    let codes = quant::quantize_per_channel(&weight, &wq)?;
    let rows = weight.shape()[0];
    let cols = weight.len() / rows;
    let codes2 = IntTensor::from_vec(&[rows, cols], codes.data().to_vec())?;
    let packed = pack_bitplanes(&codes2, w_bits, 1 << (w_bits - 1))?;
    let a_fit = quant::fit_scale_slice(activation.data(), a_bits, false)?;
    Ok(LayerParams::Quantized {
        packed,
        scales: wq.scales,
        bias: model.bias_of(index).map(<[f32]>::to_vec),
        a_quant: a_fit.params,
    })
}

fn require_fp32(model: &Model) -> Result<()> {
    if model.params.iter().any(LayerParams::is_quantized) {
        return Err(Error::Config(
            "model already contains quantized layers".into(),
        ));
    }
    Ok(())
}

/// Score every quantizable layer on the calibration input and assign the
/// `ceil(keep_fraction * L)` most sensitive of the `L` quantizable layers to
/// FP32; the rest get the requested low-bit pair. Ties keep the earlier
/// layer in FP32. Non-quantizable layers are always FP32.
pub fn plan_mixed_precision(
    model: &Model,
    calib: &Tensor,
    a_bits: u8,
    w_bits: u8,
    keep_fraction: f32,
) -> Result<PrecisionPlan> {
    check_bits(a_bits, "activation")?;
    check_bits(w_bits, "weight")?;
    if !(0.0..=1.0).contains(&keep_fraction) || !keep_fraction.is_finite() {
        return Err(Error::Config(format!(
            "keep fraction must be in [0,1], got {}",
            keep_fraction
        )));
    }
    require_fp32(model)?;
    model.check()?;

    let (baseline, layer_inputs) = sim::forward_fp32_trace(model, calib)?;
    let quantizable: Vec<usize> = model
        .graph
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.quantizable())
        .map(|(i, _)| i)
        .collect();

    let mut scored: Vec<(usize, f32)> = Vec::with_capacity(quantizable.len());
    for &i in &quantizable {
        let mut candidate = model.clone();
        candidate.params[i] = quantize_layer(model, i, a_bits, w_bits, &layer_inputs[i])?;
        let out = sim::simulate(&candidate, calib)?;
        scored.push((i, mse(&baseline, &out)));
    }

    let keep = ((keep_fraction as f64) * (quantizable.len() as f64)).ceil() as usize;
    let mut ranked = scored.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let kept: Vec<usize> = ranked.iter().take(keep).map(|&(i, _)| i).collect();

    let mut assignment = BTreeMap::new();
    for (i, layer) in model.graph.layers.iter().enumerate() {
        let precision = if layer.kind.quantizable() && !kept.contains(&i) {
            LayerPrecision::Quantized { a_bits, w_bits }
        } else {
            LayerPrecision::Fp32
        };
        assignment.insert(layer.id.clone(), precision);
    }
    let sensitivity = scored
        .into_iter()
        .map(|(i, s)| (model.graph.layers[i].id.clone(), s))
        .collect();
    Ok(PrecisionPlan {
        assignment,
        sensitivity,
    })
}

/// Apply a precision plan to an FP32 model, producing a model whose planned
/// layers carry packed weights and calibrated activation quantizers.
pub fn quantize_model(model: &Model, plan: &PrecisionPlan, calib: &Tensor) -> Result<Model> {
    require_fp32(model)?;
    model.check()?;
    for layer in &model.graph.layers {
        match plan.assignment.get(&layer.id) {
            None => {
                return Err(Error::Config(format!(
                    "plan is missing layer '{}'",
                    layer.id
                )))
            }
            Some(LayerPrecision::Quantized { .. }) if !layer.kind.quantizable() => {
                return Err(Error::Config(format!(
                    "layer '{}' ({}) cannot be quantized",
                    layer.id,
                    layer.kind.op_name()
                )))
            }
            _ => {}
        }
    }
    let (_, layer_inputs) = sim::forward_fp32_trace(model, calib)?;
    let mut out = model.clone();
    for (i, layer) in model.graph.layers.iter().enumerate() {
        if let Some(LayerPrecision::Quantized { a_bits, w_bits }) = plan.assignment.get(&layer.id)
        {
            out.params[i] = quantize_layer(model, i, *a_bits, *w_bits, &layer_inputs[i])?;
        }
    }
    Ok(out)
}

/// Plan and apply in one step.
pub fn plan_and_quantize(
    model: &Model,
    calib: &Tensor,
    a_bits: u8,
    w_bits: u8,
    keep_fraction: f32,
) -> Result<(PrecisionPlan, Model)> {
    let plan = plan_mixed_precision(model, calib, a_bits, w_bits, keep_fraction)?;
    let quantized = quantize_model(model, &plan, calib)?;
    Ok((plan, quantized))
}
