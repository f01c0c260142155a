//! Text format for describing networks.
//!
//! A description is line-oriented: `#` starts a comment, blank lines are
//! skipped, the first directive must be `input C H W`, and every other line
//! declares a layer as `<kind> <id> key=value ...`:
//!
//! ```text
//! input 3 32 32
//! conv c1 filters=16 kernel=3x3 stride=1 pad=1 bias=true seed=7
//! relu r1
//! maxpool p1 window=2 stride=2
//! conv c2 filters=16 kernel=3 pad=1
//! relu r2
//! dense fc units=10 bias=true
//! ```
//!
//! Weights come either from a seeded uniform initializer (`seed=`, defaulting
//! to the 1-based layer position) or from tensor files (`weight_file=`,
//! `bias_file=`, relative to the description's directory). Syntax problems
//! report 1-based line and column positions; geometry and topology problems
//! surface when the model is built.

use crate::container;
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, Layer, LayerKind, LayerParams, Model};
use crate::ops::ConvParams;
use crate::tensor::{Fill, Layout, Tensor};
use std::path::{Path, PathBuf};

/// Where one layer's parameters come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerInit {
    None,
    Seeded { seed: u64 },
    Files { weight: PathBuf, bias: Option<PathBuf> },
}

/// Parsed description: the graph plus one initializer per layer.
#[derive(Debug, Clone)]
pub struct NetDescription {
    pub graph: GraphSpec,
    pub inits: Vec<LayerInit>,
}

fn perr(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

/// Whitespace-separated tokens with their 1-based starting columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

fn parse_usize(line: usize, col: usize, text: &str, what: &str) -> Result<usize> {
    text.parse::<usize>()
        .map_err(|_| perr(line, col, format!("{} must be an unsigned integer, got '{}'", what, text)))
}

fn parse_u64(line: usize, col: usize, text: &str, what: &str) -> Result<u64> {
    text.parse::<u64>()
        .map_err(|_| perr(line, col, format!("{} must be an unsigned integer, got '{}'", what, text)))
}

fn parse_bool(line: usize, col: usize, text: &str, what: &str) -> Result<bool> {
    match text {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(perr(
            line,
            col,
            format!("{} must be 'true' or 'false', got '{}'", what, other),
        )),
    }
}

/// `N` or `AxB`.
fn parse_pair(line: usize, col: usize, text: &str, what: &str) -> Result<(usize, usize)> {
    match text.split_once('x') {
        Some((a, b)) => Ok((
            parse_usize(line, col, a, what)?,
            parse_usize(line, col, b, what)?,
        )),
        None => {
            let v = parse_usize(line, col, text, what)?;
            Ok((v, v))
        }
    }
}

struct KeyValue<'a> {
    line: usize,
    key_col: usize,
    value_col: usize,
    key: &'a str,
    value: &'a str,
}

fn split_key_values<'a>(
    line_no: usize,
    rest: &[(usize, &'a str)],
) -> Result<Vec<KeyValue<'a>>> {
    let mut out = Vec::with_capacity(rest.len());
    for &(col, token) in rest {
        let Some((key, value)) = token.split_once('=') else {
            return Err(perr(line_no, col, format!("expected key=value, got '{}'", token)));
        };
        if key.is_empty() || value.is_empty() {
            return Err(perr(line_no, col, format!("expected key=value, got '{}'", token)));
        }
        out.push(KeyValue {
            line: line_no,
            key_col: col,
            value_col: col + key.len() + 1,
            key,
            value,
        });
    }
    Ok(out)
}

#[derive(Default)]
struct RawKeys {
    filters: Option<usize>,
    units: Option<usize>,
    kernel: Option<(usize, usize)>,
    stride: Option<(usize, usize)>,
    pad: Option<(usize, usize)>,
    window: Option<(usize, usize)>,
    bias: Option<bool>,
    seed: Option<(u64, usize, usize)>,
    with: Option<String>,
    weight_file: Option<(PathBuf, usize, usize)>,
    bias_file: Option<PathBuf>,
}

fn collect_keys(kind: &str, kvs: Vec<KeyValue<'_>>) -> Result<RawKeys> {
    let allowed: &[&str] = match kind {
        "conv" => &["filters", "kernel", "stride", "pad", "bias", "seed", "weight_file", "bias_file"],
        "dense" => &["units", "bias", "seed", "weight_file", "bias_file"],
        "relu" => &[],
        "maxpool" => &["window", "stride"],
        "add" => &["with"],
        _ => unreachable!("kind is checked by the caller"),
    };
    let mut raw = RawKeys::default();
    for kv in kvs {
        if !allowed.contains(&kv.key) {
            return Err(perr(
                kv.line,
                kv.key_col,
                format!("'{}' does not apply to {} layers", kv.key, kind),
            ));
        }
        let dup = match kv.key {
            "filters" => raw.filters.replace(parse_usize(kv.line, kv.value_col, kv.value, "filters")?).is_some(),
            "units" => raw.units.replace(parse_usize(kv.line, kv.value_col, kv.value, "units")?).is_some(),
            "kernel" => raw.kernel.replace(parse_pair(kv.line, kv.value_col, kv.value, "kernel")?).is_some(),
            "stride" => raw.stride.replace(parse_pair(kv.line, kv.value_col, kv.value, "stride")?).is_some(),
            "pad" => raw.pad.replace(parse_pair(kv.line, kv.value_col, kv.value, "pad")?).is_some(),
            "window" => raw.window.replace(parse_pair(kv.line, kv.value_col, kv.value, "window")?).is_some(),
            "bias" => raw.bias.replace(parse_bool(kv.line, kv.value_col, kv.value, "bias")?).is_some(),
            "seed" => raw
                .seed
                .replace((parse_u64(kv.line, kv.value_col, kv.value, "seed")?, kv.line, kv.key_col))
                .is_some(),
            "with" => raw.with.replace(kv.value.to_string()).is_some(),
            "weight_file" => raw
                .weight_file
                .replace((PathBuf::from(kv.value), kv.line, kv.key_col))
                .is_some(),
            "bias_file" => raw.bias_file.replace(PathBuf::from(kv.value)).is_some(),
            _ => unreachable!(),
        };
        if dup {
            return Err(perr(kv.line, kv.key_col, format!("duplicate key '{}'", kv.key)));
        }
    }
    Ok(raw)
}

fn require<T>(value: Option<T>, line: usize, key: &str, kind: &str) -> Result<T> {
    value.ok_or_else(|| perr(line, 1, format!("{} layers require {}=", kind, key)))
}

fn weight_init(raw: &RawKeys, line: usize, default_seed: u64, has_bias: bool) -> Result<LayerInit> {
    match (&raw.seed, &raw.weight_file) {
        (Some(_), Some((_, l, c))) => {
            Err(perr(*l, *c, "seed and weight_file are mutually exclusive"))
        }
        (_, Some((weight, l, c))) => {
            if raw.bias_file.is_some() && !has_bias {
                return Err(perr(*l, *c, "bias_file requires bias=true"));
            }
            if has_bias && raw.bias_file.is_none() {
                return Err(perr(*l, *c, "bias=true with weight_file requires bias_file"));
            }
            Ok(LayerInit::Files {
                weight: weight.clone(),
                bias: raw.bias_file.clone(),
            })
        }
        (seed, None) => {
            if let Some(bias_file) = &raw.bias_file {
                return Err(perr(
                    line,
                    1,
                    format!("bias_file {} needs weight_file", bias_file.display()),
                ));
            }
            Ok(LayerInit::Seeded {
                seed: seed.map_or(default_seed, |(s, _, _)| s),
            })
        }
    }
}

/// Parse a description from text.
pub fn parse(text: &str) -> Result<NetDescription> {
    let mut input: Option<(usize, usize, usize)> = None;
    let mut layers = Vec::new();
    let mut inits = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let stripped = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let toks = tokens(stripped);
        if toks.is_empty() {
            continue;
        }
        let (kind_col, kind) = toks[0];

        if input.is_none() {
            if kind != "input" {
                return Err(perr(line_no, kind_col, "the first directive must be 'input C H W'"));
            }
            if toks.len() != 4 {
                return Err(perr(line_no, kind_col, "input takes exactly three extents: C H W"));
            }
            let c = parse_usize(line_no, toks[1].0, toks[1].1, "input channels")?;
            let h = parse_usize(line_no, toks[2].0, toks[2].1, "input height")?;
            let w = parse_usize(line_no, toks[3].0, toks[3].1, "input width")?;
            input = Some((c, h, w));
            continue;
        }
        if kind == "input" {
            return Err(perr(line_no, kind_col, "input was already declared"));
        }
        if !matches!(kind, "conv" | "dense" | "relu" | "maxpool" | "add") {
            return Err(perr(line_no, kind_col, format!("unknown layer kind '{}'", kind)));
        }
        let Some(&(_, id)) = toks.get(1) else {
            return Err(perr(line_no, kind_col, format!("{} needs a layer id", kind)));
        };
        if id.contains('=') {
            return Err(perr(line_no, toks[1].0, format!("{} needs a layer id before its keys", kind)));
        }

        let raw = collect_keys(kind, split_key_values(line_no, &toks[2..])?)?;
        let default_seed = (layers.len() + 1) as u64;
        let (layer_kind, init) = match kind {
            "conv" => {
                let filters = require(raw.filters, line_no, "filters", "conv")?;
                let kernel = require(raw.kernel, line_no, "kernel", "conv")?;
                let bias = raw.bias.unwrap_or(false);
                let kind = LayerKind::Conv2d {
                    out_channels: filters,
                    params: ConvParams::new(
                        raw.stride.unwrap_or((1, 1)),
                        raw.pad.unwrap_or((0, 0)),
                        kernel,
                    ),
                    bias,
                };
                (kind, weight_init(&raw, line_no, default_seed, bias)?)
            }
            "dense" => {
                let units = require(raw.units, line_no, "units", "dense")?;
                let bias = raw.bias.unwrap_or(false);
                let kind = LayerKind::Dense {
                    out_features: units,
                    bias,
                };
                (kind, weight_init(&raw, line_no, default_seed, bias)?)
            }
            "relu" => (LayerKind::Relu, LayerInit::None),
            "maxpool" => {
                let window = require(raw.window, line_no, "window", "maxpool")?;
                let kind = LayerKind::MaxPool2d {
                    window,
                    stride: raw.stride.unwrap_or(window),
                };
                (kind, LayerInit::None)
            }
            "add" => {
                let with = require(raw.with, line_no, "with", "add")?;
                (LayerKind::Add { with }, LayerInit::None)
            }
            _ => unreachable!(),
        };
        layers.push(Layer {
            id: id.to_string(),
            kind: layer_kind,
        });
        inits.push(init);
    }

    let Some(input) = input else {
        return Err(perr(1, 1, "description is empty; expected 'input C H W'"));
    };
    Ok(NetDescription {
        graph: GraphSpec { input, layers },
        inits,
    })
}

pub fn parse_file(path: impl AsRef<Path>) -> Result<NetDescription> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

fn seeded_tensor(shape: &[usize], layout: Layout, fan_in: usize, seed: u64) -> Result<Tensor> {
    let r = 1.0 / (fan_in as f32).sqrt();
    Tensor::new(shape, layout, Fill::Uniform { lo: -r, hi: r, seed })
}

fn loaded_weight(id: &str, path: &Path, expected: &[usize], layout: Layout) -> Result<Tensor> {
    let t = container::read_tensor(path)?;
    if t.shape() != expected {
        return Err(Error::Shape(format!(
            "layer '{}' weight file {} has shape {:?}, expected {:?}",
            id,
            path.display(),
            t.shape(),
            expected
        )));
    }
    Tensor::from_vec(expected, layout, t.data().to_vec())
}

/// Materialize a model: validate the graph, then fill every weight-bearing
/// layer from its initializer. File paths resolve against `base_dir`.
pub fn build_model(desc: &NetDescription, base_dir: &Path) -> Result<Model> {
    desc.graph.check()?;
    let shapes = desc.graph.infer_shapes(1)?;
    let mut params = Vec::with_capacity(desc.inits.len());
    for (i, layer) in desc.graph.layers.iter().enumerate() {
        let Some(shape) = desc.graph.weight_shape(i, &shapes) else {
            params.push(LayerParams::None);
            continue;
        };
        let layout = if shape.len() == 4 { Layout::Nchw } else { Layout::RowMajor2d };
        let rows = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        let has_bias = matches!(
            layer.kind,
            LayerKind::Conv2d { bias: true, .. } | LayerKind::Dense { bias: true, .. }
        );
        let param = match &desc.inits[i] {
            LayerInit::Seeded { seed } => {
                let weight = seeded_tensor(&shape, layout, fan_in, *seed)?;
                let bias = if has_bias {
                    Some(
                        seeded_tensor(&[rows], Layout::Flat, fan_in, seed.wrapping_add(1))?
                            .data()
                            .to_vec(),
                    )
                } else {
                    None
                };
                LayerParams::Fp32 { weight, bias }
            }
            LayerInit::Files { weight, bias } => {
                let weight = loaded_weight(&layer.id, &base_dir.join(weight), &shape, layout)?;
                let bias = match bias {
                    Some(path) => {
                        let full = base_dir.join(path);
                        let t = container::read_tensor(&full)?;
                        if t.shape() != [rows] {
                            return Err(Error::Shape(format!(
                                "layer '{}' bias file {} has shape {:?}, expected [{}]",
                                layer.id,
                                full.display(),
                                t.shape(),
                                rows
                            )));
                        }
                        Some(t.data().to_vec())
                    }
                    None => None,
                };
                LayerParams::Fp32 { weight, bias }
            }
            LayerInit::None => {
                return Err(Error::Config(format!(
                    "layer '{}' needs weights but has no initializer",
                    layer.id
                )))
            }
        };
        params.push(param);
    }
    let model = Model {
        graph: desc.graph.clone(),
        params,
    };
    model.check()?;
    Ok(model)
}

/// Parse a description file and build its model in one step.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let desc = parse_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build_model(&desc, base)
}
