//! Model container serialization.
//!
//! File layout: magic `DLBR`, u32 LE format version, u32 LE header length,
//! a JSON header (graph, per-layer precision metadata, blob table), zero
//! padding to the next 64-byte boundary, then the blob payloads. Blob
//! offsets are relative to that 64-aligned payload base and are themselves
//! 64-aligned. FP32 blobs hold f32 little-endian data; packed blobs hold
//! plane-major u64 little-endian bitplane words.
//!
//! Loading is fail-fast and never panics on malformed input: each corruption
//! class maps to a distinct error (bad magic, unsupported version, truncation,
//! malformed header, overlapping blobs, dangling blob references, graph
//! problems).
//!
//! Also hosts the flat tensor exchange codec used by the command-line tools:
//! magic `TNSR`, u32 LE rank, rank u32 LE extents, f32 LE data.

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, LayerParams, Model};
use crate::quant::QuantParams;
use crate::tensor::{Layout, Tensor};
use crate::bitpack::Bitplanes;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DLBR";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

// ── header schema ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    graph: GraphSpec,
    layers: Vec<LayerMeta>,
    blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "precision", rename_all = "snake_case")]
enum LayerMeta {
    None,
    Fp32,
    Quantized { a_bits: u8, a_scale: f32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    offset: u64,
    len: u64,
    #[serde(flatten)]
    encoding: Encoding,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
enum Encoding {
    Fp32Dense {
        shape: Vec<usize>,
    },
    BitplanePacked {
        rows: usize,
        cols: usize,
        bits: u8,
        zero_point: i32,
    },
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u64_bytes(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect()
}

fn read_u64s(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

// ── saving ─────────────────────────────────────────────────────────────────

/// Serialize a validated model to container bytes.
pub fn save_bytes(model: &Model) -> Result<Vec<u8>> {
    model.check()?;
    let mut blobs = BTreeMap::new();
    let mut payloads: Vec<(usize, Vec<u8>)> = Vec::new();
    let mut cursor = 0usize;
    let mut push_blob = |name: String, encoding: Encoding, data: Vec<u8>| {
        let offset = cursor;
        blobs.insert(
            name,
            BlobEntry {
                offset: offset as u64,
                len: data.len() as u64,
                encoding,
            },
        );
        cursor = align_up(offset + data.len());
        payloads.push((offset, data));
    };

    let mut layers = Vec::with_capacity(model.params.len());
    for (layer, params) in model.graph.layers.iter().zip(&model.params) {
        match params {
            LayerParams::None => layers.push(LayerMeta::None),
            LayerParams::Fp32 { weight, bias } => {
                layers.push(LayerMeta::Fp32);
                push_blob(
                    format!("{}.weight", layer.id),
                    Encoding::Fp32Dense {
                        shape: weight.shape().to_vec(),
                    },
                    f32_bytes(weight.data()),
                );
                if let Some(b) = bias {
                    push_blob(
                        format!("{}.bias", layer.id),
                        Encoding::Fp32Dense { shape: vec![b.len()] },
                        f32_bytes(b),
                    );
                }
            }
            LayerParams::Quantized {
                packed,
                scales,
                bias,
                a_quant,
            } => {
                layers.push(LayerMeta::Quantized {
                    a_bits: a_quant.bits,
                    a_scale: a_quant.scale,
                });
                push_blob(
                    format!("{}.weight", layer.id),
                    Encoding::BitplanePacked {
                        rows: packed.rows(),
                        cols: packed.cols(),
                        bits: packed.bits(),
                        zero_point: packed.zero_point(),
                    },
                    u64_bytes(packed.words()),
                );
                push_blob(
                    format!("{}.scales", layer.id),
                    Encoding::Fp32Dense {
                        shape: vec![scales.len()],
                    },
                    f32_bytes(scales),
                );
                if let Some(b) = bias {
                    push_blob(
                        format!("{}.bias", layer.id),
                        Encoding::Fp32Dense { shape: vec![b.len()] },
                        f32_bytes(b),
                    );
                }
            }
        }
    }

    let header = Header {
        graph: model.graph.clone(),
        layers,
        blobs,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let base = align_up(12 + json.len());
    let total = base + payloads.iter().map(|(o, d)| o + d.len()).max().unwrap_or(0);
    let mut out = vec![0u8; total];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..8].copy_from_slice(&VERSION.to_le_bytes());
    out[8..12].copy_from_slice(&(json.len() as u32).to_le_bytes());
    out[12..12 + json.len()].copy_from_slice(&json);
    for (offset, data) in payloads {
        out[base + offset..base + offset + data.len()].copy_from_slice(&data);
    }
    Ok(out)
}

// ── loading ────────────────────────────────────────────────────────────────

struct BlobReader<'a> {
    bytes: &'a [u8],
    base: usize,
    blobs: &'a BTreeMap<String, BlobEntry>,
    referenced: Vec<String>,
}

impl<'a> BlobReader<'a> {
    fn entry(&mut self, layer: &str, name: &str) -> Result<&'a BlobEntry> {
        match self.blobs.get(name) {
            Some(e) => {
                self.referenced.push(name.to_string());
                Ok(e)
            }
            None => Err(Error::DanglingBlob(format!(
                "layer '{}' references missing blob '{}'",
                layer, name
            ))),
        }
    }

    fn payload(&self, name: &str, entry: &BlobEntry) -> Result<&'a [u8]> {
        let offset = entry.offset as usize;
        let len = entry.len as usize;
        if offset % ALIGN != 0 {
            return Err(Error::Header(format!(
                "blob '{}' offset {} is not {}-byte aligned",
                name, offset, ALIGN
            )));
        }
        let start = self.base.checked_add(offset);
        let end = start.and_then(|s| s.checked_add(len));
        match (start, end) {
            (Some(s), Some(e)) if e <= self.bytes.len() => Ok(&self.bytes[s..e]),
            _ => Err(Error::Truncated(format!(
                "blob '{}' extends past end of file",
                name
            ))),
        }
    }

    fn fp32(&mut self, layer: &str, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = self.entry(layer, name)?;
        let Encoding::Fp32Dense { ref shape } = entry.encoding else {
            return Err(Error::Header(format!("blob '{}' is not fp32 dense", name)));
        };
        let data = self.payload(name, entry)?;
        let expected: usize = shape.iter().product::<usize>() * 4;
        if data.len() != expected {
            return Err(Error::Header(format!(
                "blob '{}' holds {} bytes, shape needs {}",
                name,
                data.len(),
                expected
            )));
        }
        Ok((shape.clone(), read_f32s(data)))
    }

    fn packed(&mut self, layer: &str, name: &str) -> Result<Bitplanes> {
        let entry = self.entry(layer, name)?;
        let Encoding::BitplanePacked {
            rows,
            cols,
            bits,
            zero_point,
        } = entry.encoding
        else {
            return Err(Error::Header(format!("blob '{}' is not bitplane packed", name)));
        };
        let data = self.payload(name, entry)?;
        if data.len() % 8 != 0 {
            return Err(Error::Header(format!(
                "blob '{}' length {} is not a whole number of words",
                name,
                data.len()
            )));
        }
        Bitplanes::from_words(rows, cols, bits, zero_point, read_u64s(data))
    }
}

fn check_overlaps(base: usize, blobs: &BTreeMap<String, BlobEntry>) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = blobs
        .iter()
        .map(|(name, e)| (e.offset, e.offset.saturating_add(e.len), name.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::BlobOverlap(format!(
                "blobs '{}' and '{}' overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    let _ = base;
    Ok(())
}

/// Deserialize a model from container bytes, validating as it goes.
pub fn load_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let Some(header_end) = 12usize.checked_add(header_len) else {
        return Err(Error::Truncated("header length overflows".into()));
    };
    if header_end > bytes.len() {
        return Err(Error::Truncated(format!(
            "header claims {} bytes, file has {}",
            header_len,
            bytes.len() - 12
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    if header.layers.len() != header.graph.layers.len() {
        return Err(Error::Header(format!(
            "{} layer entries for {} graph layers",
            header.layers.len(),
            header.graph.layers.len()
        )));
    }
    let base = align_up(header_end);
    check_overlaps(base, &header.blobs)?;

    let mut reader = BlobReader {
        bytes,
        base,
        blobs: &header.blobs,
        referenced: Vec::new(),
    };
    let mut params = Vec::with_capacity(header.layers.len());
    for (layer, meta) in header.graph.layers.iter().zip(&header.layers) {
        let param = match meta {
            LayerMeta::None => LayerParams::None,
            LayerMeta::Fp32 => {
                let (shape, data) = reader.fp32(&layer.id, &format!("{}.weight", layer.id))?;
                let layout = if shape.len() == 4 { Layout::Nchw } else { Layout::RowMajor2d };
                let weight = Tensor::from_vec(&shape, layout, data)?;
                let bias_name = format!("{}.bias", layer.id);
                let bias = if header.blobs.contains_key(&bias_name) {
                    Some(reader.fp32(&layer.id, &bias_name)?.1)
                } else {
                    None
                };
                LayerParams::Fp32 { weight, bias }
            }
            LayerMeta::Quantized { a_bits, a_scale } => {
                let packed = reader.packed(&layer.id, &format!("{}.weight", layer.id))?;
                let (_, scales) = reader.fp32(&layer.id, &format!("{}.scales", layer.id))?;
                let bias_name = format!("{}.bias", layer.id);
                let bias = if header.blobs.contains_key(&bias_name) {
                    Some(reader.fp32(&layer.id, &bias_name)?.1)
                } else {
                    None
                };
                let a_quant = QuantParams::new(*a_bits, *a_scale, false)
                    .map_err(|e| Error::Header(e.to_string()))?;
                LayerParams::Quantized {
                    packed,
                    scales,
                    bias,
                    a_quant,
                }
            }
        };
        params.push(param);
    }
    for name in header.blobs.keys() {
        if !reader.referenced.iter().any(|r| r == name) {
            return Err(Error::DanglingBlob(format!(
                "blob '{}' is not referenced by any layer",
                name
            )));
        }
    }

    let model = Model {
        graph: header.graph,
        params,
    };
    model.check()?;
    Ok(model)
}

pub fn save_file(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = save_bytes(model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    load_bytes(&bytes)
}

// ── flat tensor exchange format ────────────────────────────────────────────

pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";

pub fn write_tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + t.shape().len() * 4 + t.len() * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&f32_bytes(t.data()));
    out
}

pub fn read_tensor_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("tensor file shorter than its header".into()));
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if !(1..=8).contains(&rank) {
        return Err(Error::Header(format!("tensor rank {} out of range", rank)));
    }
    let data_start = 8 + rank * 4;
    if bytes.len() < data_start {
        return Err(Error::Truncated("tensor extents cut short".into()));
    }
    let shape: Vec<usize> = bytes[8..data_start]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let elems: usize = shape.iter().product();
    let expected = data_start + elems * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "tensor data holds {} bytes, shape needs {}",
            bytes.len() - data_start,
            elems * 4
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Header(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - expected
        )));
    }
    let layout = match shape.len() {
        4 => Layout::Nchw,
        2 => Layout::RowMajor2d,
        _ => Layout::Flat,
    };
    Tensor::from_vec(&shape, layout, read_f32s(&bytes[data_start..]))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, write_tensor_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor_bytes(&bytes)
}
