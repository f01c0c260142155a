//! Network description: an ordered layer chain with optional skip adds,
//! plus the weighted `Model` built on top of it.
//!
//! A graph is a single-input chain. Each layer consumes the previous layer's
//! output; `add` layers additionally reference an earlier layer by id, which
//! makes the graph a DAG in topological order by construction. Dense layers
//! flatten 4-D inputs implicitly (row-major NCHW), so no separate flatten
//! layer exists.

use crate::bitpack::Bitplanes;
use crate::error::{Error, Result, Violation, ViolationKind};
use crate::ops::ConvParams;
use crate::quant::QuantParams;
use crate::tensor::{Layout, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        params: ConvParams,
        bias: bool,
    },
    Dense {
        out_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Add {
        with: String,
    },
}

impl LayerKind {
    /// Conv and dense layers carry weights and are candidates for low-bit
    /// execution; everything else always runs in FP32.
    pub fn quantizable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Add { .. } => "add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Structure of a network: input extents (channels, height, width) and the
/// ordered layer list. Weights live in [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

fn shape_violation(layer: &str, msg: String) -> Violation {
    Violation {
        layer: Some(layer.to_string()),
        kind: ViolationKind::Shape,
        message: msg,
    }
}

fn topo_violation(layer: Option<&str>, msg: String) -> Violation {
    Violation {
        layer: layer.map(str::to_string),
        kind: ViolationKind::Topology,
        message: msg,
    }
}

impl GraphSpec {
    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Output shape of every layer for the given batch size, in layer order.
    /// Fails on the first geometry problem; use [`GraphSpec::validate`] for a
    /// full report.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let (c, h, w) = self.input;
        if batch == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input extents must be >= 1, got batch {} and input {:?}",
                batch, self.input
            )));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = vec![batch, c, h, w];
        for layer in &self.layers {
            cur = self.layer_out_shape(layer, &cur, &shapes)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    fn layer_out_shape(
        &self,
        layer: &Layer,
        input: &[usize],
        previous: &[Vec<usize>],
    ) -> Result<Vec<usize>> {
        let err = |msg: String| Error::Shape(format!("layer '{}': {}", layer.id, msg));
        match &layer.kind {
            LayerKind::Conv2d {
                out_channels,
                params,
                ..
            } => {
                let &[n, _, h, w] = four(input).ok_or_else(|| err("needs 4-D input".into()))?;
                let (oh, ow) = params
                    .out_dims(h, w)
                    .map_err(|e| err(e.to_string()))?;
                if *out_channels == 0 {
                    return Err(err("zero output channels".into()));
                }
                Ok(vec![n, *out_channels, oh, ow])
            }
            LayerKind::Dense { out_features, .. } => {
                let (n, _) = flat2(input).ok_or_else(|| err("needs 2-D or 4-D input".into()))?;
                if *out_features == 0 {
                    return Err(err("zero output features".into()));
                }
                Ok(vec![n, *out_features])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { window, stride } => {
                let &[n, c, h, w] = four(input).ok_or_else(|| err("needs 4-D input".into()))?;
                let p = ConvParams::new(*stride, (0, 0), *window);
                let (oh, ow) = p.out_dims(h, w).map_err(|e| err(e.to_string()))?;
                Ok(vec![n, c, oh, ow])
            }
            LayerKind::Add { with } => {
                let idx = self
                    .layer_index(with)
                    .ok_or_else(|| Error::Topology(format!(
                        "layer '{}' adds unknown layer '{}'",
                        layer.id, with
                    )))?;
                let other = previous.get(idx).ok_or_else(|| {
                    Error::Topology(format!(
                        "layer '{}' adds '{}', which comes later in the chain",
                        layer.id, with
                    ))
                })?;
                if other.as_slice() != input {
                    return Err(err(format!(
                        "add operands differ: {:?} vs {:?} from '{}'",
                        input, other, with
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Full structural check. Returns every violation found rather than
    /// stopping at the first.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        if self.layers.is_empty() {
            violations.push(topo_violation(None, "graph has no layers".into()));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            violations.push(Violation {
                layer: None,
                kind: ViolationKind::Shape,
                message: format!("input extents must be >= 1, got {:?}", self.input),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id.is_empty() {
                violations.push(topo_violation(None, format!("layer {} has an empty id", i)));
            }
            if self.layers[..i].iter().any(|l| l.id == layer.id) {
                violations.push(topo_violation(
                    Some(&layer.id),
                    "duplicate layer id".into(),
                ));
            }
            if let LayerKind::Add { with } = &layer.kind {
                match self.layer_index(with) {
                    None => violations.push(topo_violation(
                        Some(&layer.id),
                        format!("adds unknown layer '{}'", with),
                    )),
                    Some(j) if j >= i => violations.push(topo_violation(
                        Some(&layer.id),
                        format!("adds '{}', which does not come earlier", with),
                    )),
                    _ => {}
                }
            }
        }
        if violations.is_empty() {
            // geometry only makes sense once the topology is sound
            let mut shapes: Vec<Vec<usize>> = Vec::new();
            let mut cur = vec![1, c, h, w];
            for layer in &self.layers {
                match self.layer_out_shape(layer, &cur, &shapes) {
                    Ok(next) => {
                        cur = next;
                        shapes.push(cur.clone());
                    }
                    Err(e) => {
                        violations.push(shape_violation(&layer.id, e.to_string()));
                        break;
                    }
                }
            }
        }
        violations
    }

    /// [`GraphSpec::validate`] as a `Result`.
    pub fn check(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::from_violations(violations))
        }
    }

    /// Shape of the weight tensor a conv or dense layer at `index` expects,
    /// given per-layer output shapes from [`GraphSpec::infer_shapes`].
    pub fn weight_shape(&self, index: usize, shapes: &[Vec<usize>]) -> Option<Vec<usize>> {
        let input: &[usize] = if index == 0 {
            return match &self.layers[0].kind {
                LayerKind::Conv2d {
                    out_channels,
                    params,
                    ..
                } => Some(vec![*out_channels, self.input.0, params.kernel.0, params.kernel.1]),
                LayerKind::Dense { out_features, .. } => {
                    let (c, h, w) = self.input;
                    Some(vec![*out_features, c * h * w])
                }
                _ => None,
            };
        } else {
            &shapes[index - 1]
        };
        match &self.layers[index].kind {
            LayerKind::Conv2d {
                out_channels,
                params,
                ..
            } => Some(vec![*out_channels, input[1], params.kernel.0, params.kernel.1]),
            LayerKind::Dense { out_features, .. } => {
                let k = input.iter().skip(1).product();
                Some(vec![*out_features, k])
            }
            _ => None,
        }
    }
}

fn four(shape: &[usize]) -> Option<&[usize; 4]> {
    shape.try_into().ok()
}

/// 2-D view of a shape for dense layers: 4-D inputs flatten to
/// `[n, c * h * w]`, 2-D inputs pass through.
fn flat2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        &[n, k] => Some((n, k)),
        &[n, c, h, w] => Some((n, c * h * w)),
        _ => None,
    }
}

/// Per-layer parameters. Conv and dense layers hold either full-precision or
/// packed low-bit weights; other layers hold nothing.
#[derive(Debug, Clone)]
pub enum LayerParams {
    None,
    Fp32 {
        weight: Tensor,
        bias: Option<Vec<f32>>,
    },
    Quantized {
        packed: Bitplanes,
        scales: Vec<f32>,
        bias: Option<Vec<f32>>,
        a_quant: QuantParams,
    },
}

impl LayerParams {
    pub fn is_quantized(&self) -> bool {
        matches!(self, LayerParams::Quantized { .. })
    }
}

/// A graph plus the parameters of every layer, in layer order.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: GraphSpec,
    pub params: Vec<LayerParams>,
}

impl Model {
    /// Structural validation of graph and parameter agreement.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = self.graph.validate();
        if self.params.len() != self.graph.layers.len() {
            violations.push(Violation {
                layer: None,
                kind: ViolationKind::Blob,
                message: format!(
                    "{} parameter entries for {} layers",
                    self.params.len(),
                    self.graph.layers.len()
                ),
            });
            return violations;
        }
        if !violations.is_empty() {
            return violations;
        }
        let shapes = match self.graph.infer_shapes(1) {
            Ok(s) => s,
            Err(_) => return violations,
        };
        for (i, (layer, params)) in self.graph.layers.iter().zip(&self.params).enumerate() {
            let expect = self.graph.weight_shape(i, &shapes);
            match (expect, params) {
                (None, LayerParams::None) => {}
                (None, _) => violations.push(Violation {
                    layer: Some(layer.id.clone()),
                    kind: ViolationKind::Blob,
                    message: format!("{} layer carries weights", layer.kind.op_name()),
                }),
                (Some(_), LayerParams::None) => violations.push(Violation {
                    layer: Some(layer.id.clone()),
                    kind: ViolationKind::Blob,
                    message: "missing weights".into(),
                }),
                (Some(want), LayerParams::Fp32 { weight, bias }) => {
                    if weight.shape() != &want[..] {
                        violations.push(shape_violation(
                            &layer.id,
                            format!("weight shape {:?}, expected {:?}", weight.shape(), want),
                        ));
                    }
                    check_bias(&mut violations, layer, bias.as_deref(), want[0]);
                }
                (Some(want), LayerParams::Quantized {
                    packed,
                    scales,
                    bias,
                    a_quant,
                }) => {
                    let rows = want[0];
                    let cols: usize = want[1..].iter().product();
                    if packed.rows() != rows || packed.cols() != cols {
                        violations.push(shape_violation(
                            &layer.id,
                            format!(
                                "packed weights are {}x{}, expected {}x{}",
                                packed.rows(),
                                packed.cols(),
                                rows,
                                cols
                            ),
                        ));
                    }
                    if scales.len() != rows {
                        violations.push(shape_violation(
                            &layer.id,
                            format!("{} scales for {} output channels", scales.len(), rows),
                        ));
                    }
                    if a_quant.signed {
                        violations.push(Violation {
                            layer: Some(layer.id.clone()),
                            kind: ViolationKind::Precision,
                            message: "activation quantizer must be unsigned".into(),
                        });
                    }
                    if packed.zero_point() != 1 << (packed.bits() - 1) {
                        violations.push(Violation {
                            layer: Some(layer.id.clone()),
                            kind: ViolationKind::Precision,
                            message: format!(
                                "weight zero point {} does not match {}-bit signed storage",
                                packed.zero_point(),
                                packed.bits()
                            ),
                        });
                    }
                    check_bias(&mut violations, layer, bias.as_deref(), rows);
                }
            }
        }
        violations
    }

    pub fn check(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::from_violations(violations))
        }
    }

    /// Reconstruct a conv/dense layer's FP32 weight tensor. Quantized layers
    /// dequantize their packed codes with the per-channel scales.
    pub fn weight_tensor(&self, index: usize) -> Result<Tensor> {
        let shapes = self.graph.infer_shapes(1)?;
        let want = self
            .graph
            .weight_shape(index, &shapes)
            .ok_or_else(|| Error::Config(format!("layer {} has no weights", index)))?;
        match &self.params[index] {
            LayerParams::Fp32 { weight, .. } => Ok(weight.clone()),
            LayerParams::Quantized { packed, scales, .. } => {
                let codes = packed.unpack()?;
                let per = codes.len() / scales.len();
                let data = codes
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| c as f32 * scales[i / per])
                    .collect();
                let layout = if want.len() == 4 { Layout::Nchw } else { Layout::RowMajor2d };
                Tensor::from_vec(&want, layout, data)
            }
            LayerParams::None => Err(Error::Config(format!("layer {} has no weights", index))),
        }
    }

    pub fn bias_of(&self, index: usize) -> Option<&[f32]> {
        match &self.params[index] {
            LayerParams::Fp32 { bias, .. } | LayerParams::Quantized { bias, .. } => {
                bias.as_deref()
            }
            LayerParams::None => None,
        }
    }

    /// Human-readable precision of a layer, e.g. `fp32` or `2A/2W`.
    pub fn precision_label(&self, index: usize) -> String {
        match &self.params[index] {
            LayerParams::Quantized { packed, a_quant, .. } => {
                format!("{}A/{}W", a_quant.bits, packed.bits())
            }
            _ => "fp32".into(),
        }
    }

    /// Weight storage accounting: `(fp32_bytes, stored_bytes)` where the
    /// first is the size of all conv/dense weights at FP32 and the second is
    /// their actual size (packed planes plus scales for quantized layers).
    /// Biases are excluded from both sides.
    pub fn weight_bytes(&self) -> (u64, u64) {
        let mut fp32 = 0u64;
        let mut stored = 0u64;
        for p in &self.params {
            match p {
                LayerParams::None => {}
                LayerParams::Fp32 { weight, .. } => {
                    let bytes = 4 * weight.len() as u64;
                    fp32 += bytes;
                    stored += bytes;
                }
                LayerParams::Quantized { packed, scales, .. } => {
                    fp32 += 4 * (packed.rows() * packed.cols()) as u64;
                    stored += packed.byte_len() as u64 + 4 * scales.len() as u64;
                }
            }
        }
        (fp32, stored)
    }
}

fn check_bias(
    violations: &mut Vec<Violation>,
    layer: &Layer,
    bias: Option<&[f32]>,
    rows: usize,
) {
    let declared = match &layer.kind {
        LayerKind::Conv2d { bias, .. } | LayerKind::Dense { bias, .. } => *bias,
        _ => false,
    };
    match (declared, bias) {
        (true, None) => violations.push(Violation {
            layer: Some(layer.id.clone()),
            kind: ViolationKind::Blob,
            message: "bias declared but missing".into(),
        }),
        (false, Some(_)) => violations.push(Violation {
            layer: Some(layer.id.clone()),
            kind: ViolationKind::Blob,
            message: "bias present but not declared".into(),
        }),
        (true, Some(b)) if b.len() != rows => violations.push(shape_violation(
            &layer.id,
            format!("{} bias entries for {} output channels", b.len(), rows),
        )),
        _ => {}
    }
}
