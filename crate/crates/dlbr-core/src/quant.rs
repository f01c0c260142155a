//! Low-bit quantization: clip/round to codes, dequantization, quantization
//! error, and scale fitting by direct error minimization.
//!
//! A tensor `t` quantizes to `round(clip(t/s, lo, hi))` where the clip limits
//! for `b` bits are `Q_P = 2^(b-1) - 1` and `Q_N = 2^(b-1)` when signed
//! (codes in `[-Q_N, Q_P]`), or `Q_P = 2^b - 1` with `Q_N = 0` when unsigned.
//! Reconstruction is `code * s`. Rounding is half-to-even.

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};
use serde::{Deserialize, Serialize};

/// Number of scale candidates evaluated by [`fit_scale`].
const SCALE_GRID: usize = 256;

/// Per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f32,
    pub signed: bool,
}

impl QuantParams {
    pub fn new(bits: u8, scale: f32, signed: bool) -> Result<QuantParams> {
        if !(1..=3).contains(&bits) {
            return Err(Error::Config(format!("bits must be in [1,3], got {}", bits)));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "scale must be positive and finite, got {}",
                scale
            )));
        }
        Ok(QuantParams {
            bits,
            scale,
            signed,
        })
    }

    /// Upper clip limit: `2^(b-1) - 1` signed, `2^b - 1` unsigned.
    pub fn q_pos(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    /// Lower clip magnitude: `2^(b-1)` signed, `0` unsigned.
    pub fn q_neg(&self) -> i32 {
        if self.signed {
            1 << (self.bits - 1)
        } else {
            0
        }
    }

    /// Offset mapping codes into the unsigned range: `Q_N` signed, `0` unsigned.
    pub fn zero_point(&self) -> i32 {
        self.q_neg()
    }

    fn clip_range(&self) -> (f32, f32) {
        (-(self.q_neg() as f32), self.q_pos() as f32)
    }
}

/// Per-output-channel parameters for conv/dense weights: shared bits and
/// signedness, one scale per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuantParams {
    pub bits: u8,
    pub signed: bool,
    pub scales: Vec<f32>,
}

impl ChannelQuantParams {
    pub fn channel(&self, idx: usize) -> Result<QuantParams> {
        let scale = *self
            .scales
            .get(idx)
            .ok_or_else(|| Error::Config(format!("no scale for channel {}", idx)))?;
        QuantParams::new(self.bits, scale, self.signed)
    }
}

/// Result of scale fitting: chosen parameters, achieved mean-squared error,
/// and whether the input was degenerate (all zeros).
#[derive(Debug, Clone, Copy)]
pub struct ScaleFit {
    pub params: QuantParams,
    pub mse: f32,
    pub degenerate: bool,
}

fn quantize_value(t: f32, q: &QuantParams) -> Result<i32> {
    if !t.is_finite() {
        return Err(Error::Data(format!("non-finite input element {}", t)));
    }
    let (lo, hi) = q.clip_range();
    Ok((t / q.scale).clamp(lo, hi).round_ties_even() as i32)
}

/// Quantize a tensor to integer codes in the clip range of `q`.
pub fn quantize(t: &Tensor, q: &QuantParams) -> Result<IntTensor> {
    let codes = t
        .data()
        .iter()
        .map(|&v| quantize_value(v, q))
        .collect::<Result<Vec<i32>>>()?;
    IntTensor::from_vec(t.shape(), codes)
}

/// Reconstruct `code * s` for every element; codes must be in range.
pub fn dequantize(codes: &IntTensor, q: &QuantParams) -> Result<Tensor> {
    let lo = -q.q_neg();
    let hi = q.q_pos();
    let data = codes
        .data()
        .iter()
        .map(|&c| {
            if c < lo || c > hi {
                Err(Error::Data(format!(
                    "code {} outside clip range [{}, {}]",
                    c, lo, hi
                )))
            } else {
                Ok(c as f32 * q.scale)
            }
        })
        .collect::<Result<Vec<f32>>>()?;
    Tensor::from_vec(codes.shape(), crate::tensor::Layout::Flat, data)
}

/// Mean of `(t_i - t̂_i)^2` over all elements.
pub fn quant_error(t: &Tensor, q: &QuantParams) -> Result<f32> {
    if t.is_empty() {
        return Err(Error::Shape("quant_error over empty tensor".into()));
    }
    let mut sum = 0.0f64;
    for &v in t.data() {
        let code = quantize_value(v, q)?;
        let d = (v - code as f32 * q.scale) as f64;
        sum += d * d;
    }
    Ok((sum / t.len() as f64) as f32)
}

fn mse_for_scale(values: &[f32], scale: f32, bits: u8, signed: bool) -> f32 {
    let q = QuantParams {
        bits,
        scale,
        signed,
    };
    let (lo, hi) = q.clip_range();
    let mut sum = 0.0f64;
    for &v in values {
        let code = (v / scale).clamp(lo, hi).round_ties_even();
        let d = (v - code * scale) as f64;
        sum += d * d;
    }
    (sum / values.len() as f64) as f32
}

/// Fit a scale for `values` by evaluating the quantization error on a
/// geometric grid of candidates and picking the argmin (ties to smaller s).
///
/// The naive max-abs scale `max|t| / Q_P` is always among the candidates, so
/// the fitted error is never worse than it. An all-zero input is degenerate
/// and gets `s = 1` with zero error.
pub fn fit_scale_slice(values: &[f32], bits: u8, signed: bool) -> Result<ScaleFit> {
    if values.is_empty() {
        return Err(Error::Shape("fit_scale over empty tensor".into()));
    }
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite input element {}", v)));
        }
    }
    let probe = QuantParams::new(bits, 1.0, signed)?;
    let max_abs = values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(ScaleFit {
            params: probe,
            mse: 0.0,
            degenerate: true,
        });
    }
    // Q_P is zero for 1-bit signed codes {-1, 0}; fall back to 1 so the grid
    // bounds and the naive scale stay finite.
    let qp = probe.q_pos().max(1) as f32;
    let qn = probe.q_neg().max(1) as f32;
    let lo = max_abs / (qp * 8.0);
    let hi = max_abs * 2.0 / qn;
    let naive = max_abs / qp;

    let mut best_scale = naive;
    let mut best_mse = mse_for_scale(values, naive, bits, signed);
    let ratio = (hi / lo).ln();
    for i in 0..SCALE_GRID {
        let s = lo * (ratio * i as f32 / (SCALE_GRID - 1) as f32).exp();
        let mse = mse_for_scale(values, s, bits, signed);
        if mse < best_mse || (mse == best_mse && s < best_scale) {
            best_mse = mse;
            best_scale = s;
        }
    }
    Ok(ScaleFit {
        params: QuantParams::new(bits, best_scale, signed)?,
        mse: best_mse,
        degenerate: false,
    })
}

/// [`fit_scale_slice`] over a whole tensor.
pub fn fit_scale(t: &Tensor, bits: u8, signed: bool) -> Result<ScaleFit> {
    fit_scale_slice(t.data(), bits, signed)
}

/// Fit one scale per output channel of an OIHW (or row-major [M,K]) weight
/// tensor. The outermost extent is the channel count.
pub fn fit_scale_per_channel(w: &Tensor, bits: u8, signed: bool) -> Result<ChannelQuantParams> {
    let channels = w.shape()[0];
    let per = w.len() / channels;
    let mut scales = Vec::with_capacity(channels);
    for ch in 0..channels {
        let fit = fit_scale_slice(&w.data()[ch * per..(ch + 1) * per], bits, signed)?;
        scales.push(fit.params.scale);
    }
    Ok(ChannelQuantParams {
        bits,
        signed,
        scales,
    })
}

/// Quantize-then-dequantize; idempotent.
pub fn fake_quantize(t: &Tensor, q: &QuantParams) -> Result<Tensor> {
    let data = t
        .data()
        .iter()
        .map(|&v| quantize_value(v, q).map(|c| c as f32 * q.scale))
        .collect::<Result<Vec<f32>>>()?;
    Tensor::from_vec(t.shape(), t.layout(), data)
}

/// Per-output-channel fake quantization of a weight tensor.
pub fn fake_quantize_per_channel(w: &Tensor, q: &ChannelQuantParams) -> Result<Tensor> {
    let channels = w.shape()[0];
    if q.scales.len() != channels {
        return Err(Error::Config(format!(
            "{} scales for {} channels",
            q.scales.len(),
            channels
        )));
    }
    let per = w.len() / channels;
    let mut data = Vec::with_capacity(w.len());
    for ch in 0..channels {
        let params = q.channel(ch)?;
        for &v in &w.data()[ch * per..(ch + 1) * per] {
            data.push(quantize_value(v, &params)? as f32 * params.scale);
        }
    }
    Tensor::from_vec(w.shape(), w.layout(), data)
}

/// Quantize each output channel of a weight tensor with its own scale,
/// returning one flat code tensor.
pub fn quantize_per_channel(w: &Tensor, q: &ChannelQuantParams) -> Result<IntTensor> {
    let channels = w.shape()[0];
    if q.scales.len() != channels {
        return Err(Error::Config(format!(
            "{} scales for {} channels",
            q.scales.len(),
            channels
        )));
    }
    let per = w.len() / channels;
    let mut codes = Vec::with_capacity(w.len());
    for ch in 0..channels {
        let params = q.channel(ch)?;
        for &v in &w.data()[ch * per..(ch + 1) * per] {
            codes.push(quantize_value(v, &params)?);
        }
    }
    IntTensor::from_vec(w.shape(), codes)
}
