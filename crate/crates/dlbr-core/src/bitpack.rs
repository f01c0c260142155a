//! Bitplane packing: 2-D integer code matrices stored one significance plane
//! at a time, 64 elements per word.
//!
//! Element `k` of a row lands in word `k / 64`, bit `k % 64`. Storage is
//! plane-major (`[bits][rows][words_per_row]`) so a kernel can stream one
//! plane of one row as a contiguous `&[u64]`. Rows are padded to a whole
//! number of words and the padding bits are always zero, which keeps raw
//! popcounts over the padded tail exact.

use crate::error::{Error, Result};
use crate::tensor::IntTensor;

/// Upper bound on logical columns. Keeps `i32` dot-product accumulators safe:
/// the largest per-element product of 3-bit codes is 49, and
/// `49 * 2^20 < 2^31`.
pub const MAX_COLS: usize = 1 << 20;

/// A packed 2-D matrix of unsigned codes, one bitplane per significance bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitplanes {
    rows: usize,
    cols: usize,
    bits: u8,
    zero_point: i32,
    words: Vec<u64>,
}

impl Bitplanes {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Logical column count before padding.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Offset that was added to signed codes before packing.
    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn words_per_row(&self) -> usize {
        self.cols.div_ceil(64)
    }

    /// One plane of one row, `words_per_row` words.
    pub fn plane_row(&self, plane: usize, row: usize) -> &[u64] {
        let wpr = self.words_per_row();
        let base = (plane * self.rows + row) * wpr;
        &self.words[base..base + wpr]
    }

    /// Full backing store, plane-major.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Total packed size in bytes.
    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }

    /// Rebuild from a raw word buffer, validating length and padding bits.
    pub fn from_words(
        rows: usize,
        cols: usize,
        bits: u8,
        zero_point: i32,
        words: Vec<u64>,
    ) -> Result<Bitplanes> {
        if !(1..=3).contains(&bits) {
            return Err(Error::Config(format!("bits must be in [1,3], got {}", bits)));
        }
        if cols == 0 || cols > MAX_COLS {
            return Err(Error::Shape(format!(
                "packed columns must be in [1, {}], got {}",
                MAX_COLS, cols
            )));
        }
        let wpr = cols.div_ceil(64);
        let want = bits as usize * rows * wpr;
        if words.len() != want {
            return Err(Error::Shape(format!(
                "word buffer has {} words, layout needs {}",
                words.len(),
                want
            )));
        }
        let tail = cols % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            for (i, chunk) in words.chunks_exact(wpr).enumerate() {
                if chunk[wpr - 1] & mask != 0 {
                    return Err(Error::Data(format!(
                        "padding bits set in packed row {} of plane {}",
                        i % rows.max(1),
                        i / rows.max(1)
                    )));
                }
            }
        }
        Ok(Bitplanes {
            rows,
            cols,
            bits,
            zero_point,
            words,
        })
    }

    /// Recover the signed codes this matrix was packed from.
    pub fn unpack(&self) -> Result<IntTensor> {
        let mut codes = vec![0i32; self.rows * self.cols];
        for plane in 0..self.bits as usize {
            for row in 0..self.rows {
                let words = self.plane_row(plane, row);
                for col in 0..self.cols {
                    let bit = (words[col / 64] >> (col % 64)) & 1;
                    codes[row * self.cols + col] |= (bit as i32) << plane;
                }
            }
        }
        for c in &mut codes {
            *c -= self.zero_point;
        }
        IntTensor::from_vec(&[self.rows, self.cols], codes)
    }
}

/// Pack a 2-D code matrix into bitplanes.
///
/// `zero_point` is added to every code first; the offset values must fit in
/// `bits` unsigned bits. Activations use `zero_point = 0`, signed weights use
/// their quantizer's zero point.
pub fn pack_bitplanes(codes: &IntTensor, bits: u8, zero_point: i32) -> Result<Bitplanes> {
    if !(1..=3).contains(&bits) {
        return Err(Error::Config(format!("bits must be in [1,3], got {}", bits)));
    }
    let (rows, cols) = codes.dims2()?;
    if cols > MAX_COLS {
        return Err(Error::Shape(format!(
            "packed columns must be at most {}, got {}",
            MAX_COLS, cols
        )));
    }
    let max_code = (1i32 << bits) - 1;
    let wpr = cols.div_ceil(64);
    let mut words = vec![0u64; bits as usize * rows * wpr];
    for row in 0..rows {
        for col in 0..cols {
            let u = codes.data()[row * cols + col] + zero_point;
            if !(0..=max_code).contains(&u) {
                return Err(Error::Data(format!(
                    "code {} at ({}, {}) offsets to {} outside [0, {}]",
                    codes.data()[row * cols + col],
                    row,
                    col,
                    u,
                    max_code
                )));
            }
            for plane in 0..bits as usize {
                if (u >> plane) & 1 != 0 {
                    let base = (plane * rows + row) * wpr;
                    words[base + col / 64] |= 1u64 << (col % 64);
                }
            }
        }
    }
    Ok(Bitplanes {
        rows,
        cols,
        bits,
        zero_point,
        words,
    })
}
