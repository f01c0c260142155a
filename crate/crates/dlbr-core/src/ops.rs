//! Scalar FP32 reference operators.
//!
//! Deliberately naive implementations of conv2d, dense, relu, and maxpool.
//! Every quantized or bitserial path in this crate is checked against these,
//! so they stay single-threaded with a fixed left-to-right accumulation order.

use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};
use serde::{Deserialize, Serialize};

/// Convolution hyperparameters. Padding is zero-valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub kernel: (usize, usize),
}

impl ConvParams {
    pub fn new(stride: (usize, usize), padding: (usize, usize), kernel: (usize, usize)) -> ConvParams {
        ConvParams {
            stride,
            padding,
            kernel,
        }
    }

    /// Output extents for an input of `h` by `w`: `floor((x + 2p - k)/s) + 1`.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (kh, kw) = self.kernel;
        if sh == 0 || sw == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("stride and kernel extents must be >= 1".into()));
        }
        let eh = h + 2 * ph;
        let ew = w + 2 * pw;
        if eh < kh || ew < kw {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh, kw, eh, ew
            )));
        }
        Ok(((eh - kh) / sh + 1, (ew - kw) / sw + 1))
    }
}

/// Direct 7-loop convolution over NCHW input and OIHW weights.
pub fn conv2d_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    p: &ConvParams,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (o, i, kh, kw) = weight.dims4()?;
    if i != c {
        return Err(Error::Shape(format!(
            "input has {} channels but weight expects {}",
            c, i
        )));
    }
    if (kh, kw) != p.kernel {
        return Err(Error::Shape(format!(
            "weight kernel {}x{} does not match params {}x{}",
            kh, kw, p.kernel.0, p.kernel.1
        )));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                o
            )));
        }
    }
    let (oh, ow) = p.out_dims(h, w)?;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; n * o * oh * ow];
    for bn in 0..n {
        for oc in 0..o {
            let b = bias.map_or(0.0, |b| b[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bn * c + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((bn * o + oc) * oh + oy) * ow + ox] = acc + b;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], Layout::Nchw, out)
}

/// Row-major dense layer: `out[n,m] = sum_k input[n,k] * weight[m,k] + bias[m]`.
pub fn dense_f32(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (n, k) = input.dims2()?;
    let (m, wk) = weight.dims2()?;
    if k != wk {
        return Err(Error::Shape(format!(
            "inner extents differ: input K={} weight K={}",
            k, wk
        )));
    }
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} outputs",
                b.len(),
                m
            )));
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; n * m];
    for row in 0..n {
        for col in 0..m {
            let mut acc = 0.0f32;
            for kk in 0..k {
                acc += x[row * k + kk] * wt[col * k + kk];
            }
            out[row * m + col] = acc + bias.map_or(0.0, |b| b[col]);
        }
    }
    Tensor::from_vec(&[n, m], Layout::RowMajor2d, out)
}

/// Elementwise `max(0, x)`.
pub fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(t.shape(), t.layout(), data).expect("same shape")
}

/// Windowed maximum over NCHW input, no padding.
pub fn maxpool2d(t: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let p = ConvParams::new(stride, (0, 0), window);
    let (oh, ow) = p.out_dims(h, w)?;
    let x = t.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..window.0 {
                        for kx in 0..window.1 {
                            let iy = oy * stride.0 + ky;
                            let ix = ox * stride.1 + kx;
                            let v = x[((bn * c + ch) * h + iy) * w + ix];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((bn * c + ch) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], Layout::Nchw, out)
}

/// Elementwise sum of two same-shaped tensors (skip connections).
pub fn add_f32(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), a.layout(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t4(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, Layout::Nchw, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t4(&[1, 1, 1, 1], vec![3.5]);
        let w = t4(&[1, 1, 1, 1], vec![1.0]);
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        let y = conv2d_f32(&x, &w, None, &p).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn conv_sums_all_elements() {
        let x = t4(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t4(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let p = ConvParams::new((1, 1), (0, 0), (2, 2));
        let y = conv2d_f32(&x, &w, None, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let x = Tensor::new(
            &[1, 2, 3, 3],
            Layout::Nchw,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        let w = Tensor::zeros(&[1, 2, 3, 3], Layout::Nchw).unwrap();
        let p = ConvParams::new((1, 1), (1, 1), (3, 3));
        let y = conv2d_f32(&x, &w, Some(&[2.5]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 2, 2], Layout::Nchw).unwrap();
        let w = Tensor::zeros(&[1, 3, 1, 1], Layout::Nchw).unwrap();
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        assert!(matches!(conv2d_f32(&x, &w, None, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_identity_and_dot() {
        let x = Tensor::from_vec(&[1, 2], Layout::RowMajor2d, vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], Layout::RowMajor2d, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = dense_f32(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let x = Tensor::from_vec(&[1, 2], Layout::RowMajor2d, vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], Layout::RowMajor2d, vec![3.0, 4.0]).unwrap();
        let y = dense_f32(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn dense_bias_only() {
        let x = Tensor::zeros(&[1, 3], Layout::RowMajor2d).unwrap();
        let w = Tensor::zeros(&[1, 3], Layout::RowMajor2d).unwrap();
        let y = dense_f32(&x, &w, Some(&[5.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn relu_definition_and_idempotence() {
        let t = Tensor::from_vec(&[3], Layout::Flat, vec![-1.0, 0.0, 2.0]).unwrap();
        let r = relu(&t);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&r).data(), r.data());
    }

    #[test]
    fn maxpool_window() {
        let t = t4(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&t, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let t = Tensor::zeros(&[1, 1, 2, 2], Layout::Nchw).unwrap();
        assert!(matches!(
            maxpool2d(&t, (3, 3), (1, 1)),
            Err(Error::Shape(_))
        ));
    }

    // 1x1 kernel stride 1 pad 0 must agree with a per-pixel dense layer.
    #[test]
    fn conv_1x1_equals_pointwise_dense() {
        let (n, c, o, h, w) = (2, 3, 4, 5, 4);
        let x = Tensor::new(
            &[n, c, h, w],
            Layout::Nchw,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 11,
            },
        )
        .unwrap();
        let wt = Tensor::new(
            &[o, c, 1, 1],
            Layout::Nchw,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 12,
            },
        )
        .unwrap();
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        let conv = conv2d_f32(&x, &wt, None, &p).unwrap();

        // Rebuild via dense over each pixel's channel vector.
        let wm = Tensor::from_vec(&[o, c], Layout::RowMajor2d, wt.data().to_vec()).unwrap();
        for bn in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let pix: Vec<f32> = (0..c)
                        .map(|ch| x.data()[((bn * c + ch) * h + y) * w + xx])
                        .collect();
                    let row = Tensor::from_vec(&[1, c], Layout::RowMajor2d, pix).unwrap();
                    let d = dense_f32(&row, &wm, None).unwrap();
                    for oc in 0..o {
                        let got = conv.data()[((bn * o + oc) * h + y) * w + xx];
                        assert!((got - d.data()[oc]).abs() <= 1e-6 * d.data()[oc].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn conv_linearity_in_input() {
        let x = Tensor::new(
            &[1, 2, 6, 6],
            Layout::Nchw,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 21,
            },
        )
        .unwrap();
        let w = Tensor::new(
            &[3, 2, 3, 3],
            Layout::Nchw,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 22,
            },
        )
        .unwrap();
        let p = ConvParams::new((1, 1), (1, 1), (3, 3));
        for &alpha in &[2.0f32, -7.5, 16.0] {
            let scaled =
                Tensor::from_vec(x.shape(), Layout::Nchw, x.data().iter().map(|v| v * alpha).collect())
                    .unwrap();
            let lhs = conv2d_f32(&scaled, &w, None, &p).unwrap();
            let base = conv2d_f32(&x, &w, None, &p).unwrap();
            let rhs = Tensor::from_vec(
                base.shape(),
                Layout::Nchw,
                base.data().iter().map(|v| v * alpha).collect(),
            )
            .unwrap();
            assert!(lhs.allclose(&rhs, 1e-6, 1e-6).unwrap());
        }
    }
}
