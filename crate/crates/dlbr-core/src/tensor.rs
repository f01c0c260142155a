//! Dense FP32 and integer tensor containers.
//!
//! Tensors are immutable after construction: every operator takes inputs by
//! reference and returns a freshly built output, so values are safe to share
//! across concurrent readers.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Memory layout tag. Data is always stored contiguously; the tag records how
/// the shape is to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// 4-D activations/weights: batch, channel, height, width.
    Nchw,
    /// 2-D row-major matrix.
    RowMajor2d,
    /// 1-D buffer.
    Flat,
}

/// How to populate a freshly created tensor.
#[derive(Debug, Clone)]
pub enum Fill {
    /// Every element set to the given value.
    Const(f32),
    /// Elements taken verbatim; length must equal the element count.
    Sequence(Vec<f32>),
    /// Seeded uniform values in `[lo, hi]`, bit-reproducible for equal seeds.
    Uniform { lo: f32, hi: f32, seed: u64 },
}

/// Dense FP32 tensor with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    layout: Layout,
    data: Vec<f32>,
}

/// Dense 32-bit signed integer tensor (quantized codes, GEMM accumulators).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("shape must have at least one extent".into()));
    }
    let mut count = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::Shape(format!("zero extent in shape {:?}", shape)));
        }
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::Shape(format!("shape {:?} overflows element count", shape)))?;
    }
    Ok(count)
}

/// Deterministic uniform stream: ChaCha8 keyed by `seed`, each `u32` draw
/// mapped linearly onto `[lo, hi]`.
pub fn seeded_uniform(lo: f32, hi: f32, seed: u64, count: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = hi - lo;
    (0..count)
        .map(|_| lo + span * (rng.next_u32() as f32 / u32::MAX as f32))
        .collect()
}

impl Tensor {
    /// Create a tensor of the given shape and fill.
    pub fn new(shape: &[usize], layout: Layout, fill: Fill) -> Result<Tensor> {
        let count = check_shape(shape)?;
        let data = match fill {
            Fill::Const(v) => vec![v; count],
            Fill::Sequence(values) => {
                if values.len() != count {
                    return Err(Error::Shape(format!(
                        "fill sequence has {} elements, shape {:?} needs {}",
                        values.len(),
                        shape,
                        count
                    )));
                }
                values
            }
            Fill::Uniform { lo, hi, seed } => seeded_uniform(lo, hi, seed, count),
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            layout,
            data,
        })
    }

    /// Wrap an existing buffer; length must match the shape.
    pub fn from_vec(shape: &[usize], layout: Layout, data: Vec<f32>) -> Result<Tensor> {
        let count = check_shape(shape)?;
        if data.len() != count {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            layout,
            data,
        })
    }

    pub fn zeros(shape: &[usize], layout: Layout) -> Result<Tensor> {
        Tensor::new(shape, layout, Fill::Const(0.0))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret the shape as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected 4-D shape, got {:?}", other))),
        }
    }

    /// Interpret the shape as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected 2-D shape, got {:?}", other))),
        }
    }

    /// Elementwise closeness: `|a_i - b_i| <= atol + rtol * |b_i|` for all i.
    pub fn allclose(&self, other: &Tensor, rtol: f32, atol: f32) -> Result<bool> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "allclose shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs()))
    }
}

impl IntTensor {
    pub fn from_vec(shape: &[usize], data: Vec<i32>) -> Result<IntTensor> {
        let count = check_shape(shape)?;
        if data.len() != count {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(IntTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<IntTensor> {
        let count = check_shape(shape)?;
        Ok(IntTensor {
            shape: shape.to_vec(),
            data: vec![0; count],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected 4-D shape, got {:?}", other))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected 2-D shape, got {:?}", other))),
        }
    }
}

/// Largest relative deviation of `a` from `b`, with the denominator floored by
/// `abs_floor` so near-zero references do not blow up the ratio.
pub fn max_rel_error(a: &Tensor, b: &Tensor, abs_floor: f32) -> Result<(f32, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut worst = 0.0f32;
    let mut worst_idx = 0usize;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let rel = (x - y).abs() / y.abs().max(abs_floor);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    Ok((worst, worst_idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn const_fill_zero() {
        let t = Tensor::new(&[2, 2], Layout::RowMajor2d, Fill::Const(0.0)).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sequence_fill_identity() {
        let t = Tensor::new(
            &[1, 3],
            Layout::RowMajor2d,
            Fill::Sequence(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn seeded_fill_reproducible() {
        let mk = || {
            Tensor::new(
                &[2, 3],
                Layout::RowMajor2d,
                Fill::Uniform {
                    lo: -1.0,
                    hi: 1.0,
                    seed: 7,
                },
            )
            .unwrap()
        };
        let a = mk();
        let b = mk();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_extent_rejected() {
        let err = Tensor::zeros(&[2, 0], Layout::RowMajor2d).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(matches!(
            Tensor::zeros(&[], Layout::Flat),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sequence_length_mismatch_rejected() {
        let err = Tensor::new(&[2, 2], Layout::RowMajor2d, Fill::Sequence(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn allclose_identity_and_formula() {
        let a = Tensor::from_vec(&[1], Layout::Flat, vec![1.0]).unwrap();
        assert!(a.allclose(&a, 0.0, 0.0).unwrap());

        let b = Tensor::from_vec(&[1], Layout::Flat, vec![1.0001]).unwrap();
        assert!(a.allclose(&b, 1e-3, 0.0).unwrap());

        let c = Tensor::from_vec(&[1], Layout::Flat, vec![2.0]).unwrap();
        assert!(!a.allclose(&c, 1e-3, 0.0).unwrap());
    }

    #[test]
    fn allclose_shape_mismatch() {
        let a = Tensor::zeros(&[2], Layout::Flat).unwrap();
        let b = Tensor::zeros(&[3], Layout::Flat).unwrap();
        assert!(matches!(a.allclose(&b, 0.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn element_count_is_layout_independent() {
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let a = Tensor::from_vec(&[2, 3, 2, 2], Layout::Nchw, data.clone()).unwrap();
        let b = Tensor::from_vec(&[4, 6], Layout::RowMajor2d, data.clone()).unwrap();
        let c = Tensor::from_vec(&[24], Layout::Flat, data).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(b.len(), c.len());
    }

    #[test]
    fn int_tensor_basics() {
        let t = IntTensor::from_vec(&[2, 2], vec![1, -2, 3, -4]).unwrap();
        assert_eq!(t.dims2().unwrap(), (2, 2));
        assert!(IntTensor::from_vec(&[2, 2], vec![1]).is_err());
    }
}
