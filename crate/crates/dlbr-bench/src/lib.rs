//! Fixture builders shared by the criterion benches: seeded packed operand
//! matrices and a small quantized model.

use dlbr_core::bitpack::{pack_bitplanes, Bitplanes};
use dlbr_core::graph::{GraphSpec, Layer, LayerKind, LayerParams, Model};
use dlbr_core::ops::ConvParams;
use dlbr_core::precision;
use dlbr_core::{Fill, IntTensor, Layout, Tensor};

/// Deterministic code sequence in `[lo, hi]` without pulling in an RNG:
/// a linear congruential walk is plenty for benchmark data.
fn codes(len: usize, lo: i32, hi: i32, seed: u64) -> Vec<i32> {
    let span = (hi - lo + 1) as u64;
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + ((state >> 33) % span) as i32
        })
        .collect()
}

/// Packed signed weights and unsigned activations for an `m` by `n` product
/// over `k` columns.
pub fn packed_operands(m: usize, n: usize, k: usize, w_bits: u8, a_bits: u8) -> (Bitplanes, Bitplanes) {
    let zp = 1i32 << (w_bits - 1);
    let w = codes(m * k, -zp, (1 << (w_bits - 1)) - 1, 1);
    let a = codes(n * k, 0, (1 << a_bits) - 1, 2);
    let wt = IntTensor::from_vec(&[m, k], w).unwrap();
    let at = IntTensor::from_vec(&[n, k], a).unwrap();
    (
        pack_bitplanes(&wt, w_bits, zp).unwrap(),
        pack_bitplanes(&at, a_bits, 0).unwrap(),
    )
}

/// Word slices for the dot-product benches.
pub fn word_operands(words: usize) -> (Vec<u64>, Vec<u64>) {
    let w = codes(words, 0, i32::MAX, 3);
    let a = codes(words, 0, i32::MAX, 4);
    let expand = |v: &[i32]| {
        v.iter()
            .map(|&x| (x as u64).wrapping_mul(0x0101_0101_0101_0101))
            .collect()
    };
    (expand(&w), expand(&a))
}

/// A conv-dominated model quantized to 2A/2W, with its calibration input.
pub fn quantized_conv_net() -> (Model, Tensor) {
    let conv = |id: &str, oc: usize| Layer {
        id: id.into(),
        kind: LayerKind::Conv2d {
            out_channels: oc,
            params: ConvParams::new((1, 1), (1, 1), (3, 3)),
            bias: true,
        },
    };
    let graph = GraphSpec {
        input: (16, 14, 14),
        layers: vec![
            conv("c1", 32),
            Layer { id: "r1".into(), kind: LayerKind::Relu },
            conv("c2", 32),
            Layer { id: "r2".into(), kind: LayerKind::Relu },
            Layer {
                id: "fc".into(),
                kind: LayerKind::Dense { out_features: 10, bias: true },
            },
        ],
    };
    let shapes: [&[usize]; 3] = [&[32, 16, 3, 3], &[32, 32, 3, 3], &[10, 32 * 14 * 14]];
    let mut params = Vec::new();
    let mut widx = 0;
    for layer in &graph.layers {
        if layer.kind.quantizable() {
            let shape = shapes[widx];
            let layout = if shape.len() == 4 { Layout::Nchw } else { Layout::RowMajor2d };
            params.push(LayerParams::Fp32 {
                weight: Tensor::new(
                    shape,
                    layout,
                    Fill::Uniform { lo: -0.3, hi: 0.3, seed: 10 + widx as u64 },
                )
                .unwrap(),
                bias: Some(vec![0.01; shape[0]]),
            });
            widx += 1;
        } else {
            params.push(LayerParams::None);
        }
    }
    let model = Model { graph, params };
    let calib = Tensor::new(
        &[1, 16, 14, 14],
        Layout::Nchw,
        Fill::Uniform { lo: -1.0, hi: 1.0, seed: 20 },
    )
    .unwrap();
    let (_, quantized) = precision::plan_and_quantize(&model, &calib, 2, 2, 0.0).unwrap();
    (quantized, calib)
}
