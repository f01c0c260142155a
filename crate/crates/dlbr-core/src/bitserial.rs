//! Popcount dot products and integer matrix multiply over packed bitplanes.
//!
//! A 1-bit dot product is `POPCOUNT(W & A)`. Multi-bit values decompose into
//! plane pairs: `sum_i sum_j POPCOUNT(W[i] & A[j]) << (i + j)` over unsigned
//! codes. Signed weights are stored offset by their zero point and corrected
//! after the fact, so the inner loop never sees a sign.
//!
//! Everything here is exact integer arithmetic. Results are bitwise identical
//! across tile shapes, worker counts, and the portable/AVX2 backends; tests
//! hold all three equal.

use crate::bitpack::Bitplanes;
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::{IntTensor, Layout, Tensor};
use std::sync::OnceLock;

// ── popcount backends ──────────────────────────────────────────────────────

type AndPopFn = fn(&[u64], &[u64]) -> u32;

fn and_popcount_portable(w: &[u64], a: &[u64]) -> u32 {
    w.iter()
        .zip(a)
        .map(|(&x, &y)| (x & y).count_ones())
        .sum()
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    unsafe fn and_popcount_impl(w: &[u64], a: &[u64]) -> u32 {
        use std::arch::x86_64::*;
        // Per-nibble popcount table, repeated across both 128-bit lanes.
        let lut = _mm256_setr_epi8(
            0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4, 0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3,
            2, 3, 3, 4,
        );
        let low_mask = _mm256_set1_epi8(0x0f);
        let zero = _mm256_setzero_si256();
        let mut acc = zero;
        let chunks = w.len() / 4;
        for i in 0..chunks {
            let wv = _mm256_loadu_si256(w.as_ptr().add(i * 4) as *const __m256i);
            let av = _mm256_loadu_si256(a.as_ptr().add(i * 4) as *const __m256i);
            let v = _mm256_and_si256(wv, av);
            let lo = _mm256_and_si256(v, low_mask);
            let hi = _mm256_and_si256(_mm256_srli_epi16(v, 4), low_mask);
            let counts = _mm256_add_epi8(
                _mm256_shuffle_epi8(lut, lo),
                _mm256_shuffle_epi8(lut, hi),
            );
            // Byte counts max out at 8, so the sad-based horizontal sum into
            // four u64 lanes cannot overflow.
            acc = _mm256_add_epi64(acc, _mm256_sad_epu8(counts, zero));
        }
        let mut lanes = [0u64; 4];
        _mm256_storeu_si256(lanes.as_mut_ptr() as *mut __m256i, acc);
        let mut total = lanes.iter().sum::<u64>() as u32;
        for i in chunks * 4..w.len() {
            total += (w[i] & a[i]).count_ones();
        }
        total
    }

    pub fn and_popcount(w: &[u64], a: &[u64]) -> u32 {
        // Only installed as the backend after runtime AVX2 detection.
        unsafe { and_popcount_impl(w, a) }
    }
}

fn select_backend() -> AndPopFn {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        return avx2::and_popcount;
    }
    and_popcount_portable
}

static AND_POPCOUNT: OnceLock<AndPopFn> = OnceLock::new();

/// `sum POPCOUNT(w[i] & a[i])` with the fastest backend this CPU supports.
/// Both slices must have the same length.
pub fn and_popcount(w: &[u64], a: &[u64]) -> u32 {
    assert_eq!(w.len(), a.len(), "popcount operand lengths differ");
    (AND_POPCOUNT.get_or_init(select_backend))(w, a)
}

/// Name of the popcount backend in use, for diagnostics.
pub fn backend_name() -> &'static str {
    let selected = *AND_POPCOUNT.get_or_init(select_backend);
    if std::ptr::fn_addr_eq(selected, and_popcount_portable as AndPopFn) {
        "portable"
    } else {
        "avx2"
    }
}

// ── dot products ───────────────────────────────────────────────────────────

/// Binary dot product of two single planes.
pub fn dot_1bit(w: &[u64], a: &[u64]) -> i32 {
    and_popcount(w, a) as i32
}

/// Dot product of unsigned multi-bit codes given as per-plane word slices.
pub fn dot_multibit(w_planes: &[&[u64]], a_planes: &[&[u64]]) -> i32 {
    let mut acc = 0i32;
    for (i, w) in w_planes.iter().enumerate() {
        for (j, a) in a_planes.iter().enumerate() {
            acc += (and_popcount(w, a) as i32) << (i + j);
        }
    }
    acc
}

/// Sum of the codes behind a set of planes: `sum_j POPCOUNT(planes[j]) << j`.
pub fn weighted_popcount(planes: &[&[u64]]) -> i32 {
    planes
        .iter()
        .enumerate()
        .map(|(j, p)| (and_popcount(p, p) as i32) << j)
        .sum()
}

/// Dot product of offset-stored signed weights against unsigned activations.
/// Subtracting `w_zero_point * sum(a)` undoes the storage offset.
pub fn dot_corrected(w_planes: &[&[u64]], a_planes: &[&[u64]], w_zero_point: i32) -> i32 {
    dot_multibit(w_planes, a_planes) - w_zero_point * weighted_popcount(a_planes)
}

// ── tiled matrix multiply ──────────────────────────────────────────────────

/// Loop blocking for [`gemm_bitserial`]. `tile_k` is in 64-bit words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlan {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
    pub workers: usize,
}

/// Pick tile sizes for an `m` by `n` output with `k_words` packed words per
/// row: default 8 by 8 output tiles clamped to the dims, then the largest
/// `tile_k` whose m-side and n-side word streams fit in `l1_bytes` together.
pub fn make_tile_plan(
    m: usize,
    n: usize,
    k_words: usize,
    workers: usize,
    l1_bytes: usize,
) -> Result<TilePlan> {
    if l1_bytes == 0 {
        return Err(Error::Config("tile budget of zero bytes".into()));
    }
    let tile_m = m.min(8).max(1);
    let tile_n = n.min(8).max(1);
    let budget_words = l1_bytes / ((tile_m + tile_n) * 8);
    Ok(TilePlan {
        tile_m,
        tile_n,
        tile_k: k_words.min(budget_words).max(1),
        workers: workers.max(1),
    })
}

impl Default for TilePlan {
    fn default() -> TilePlan {
        TilePlan {
            tile_m: 8,
            tile_n: 8,
            tile_k: 256,
            workers: 1,
        }
    }
}

fn row_code_sums(p: &Bitplanes) -> Vec<i32> {
    (0..p.rows())
        .map(|r| {
            (0..p.bits() as usize)
                .map(|j| (and_popcount(p.plane_row(j, r), p.plane_row(j, r)) as i32) << j)
                .sum()
        })
        .collect()
}

fn gemm_band(
    w: &Bitplanes,
    a: &Bitplanes,
    m0: usize,
    out: &mut [i32],
    plan: &TilePlan,
    sum_w: &[i32],
    sum_a: &[i32],
) {
    let n_rows = a.rows();
    let wpr = w.words_per_row();
    let band_rows = out.len() / n_rows;
    let correction_base = w.cols() as i32 * w.zero_point() * a.zero_point();

    for mt in (0..band_rows).step_by(plan.tile_m) {
        let m_end = (mt + plan.tile_m).min(band_rows);
        for nt in (0..n_rows).step_by(plan.tile_n) {
            let n_end = (nt + plan.tile_n).min(n_rows);
            for kt in (0..wpr).step_by(plan.tile_k) {
                let k_end = (kt + plan.tile_k).min(wpr);
                for m in mt..m_end {
                    for n in nt..n_end {
                        let mut acc = 0i32;
                        for i in 0..w.bits() as usize {
                            let wrow = &w.plane_row(i, m0 + m)[kt..k_end];
                            for j in 0..a.bits() as usize {
                                let arow = &a.plane_row(j, n)[kt..k_end];
                                acc += (and_popcount(wrow, arow) as i32) << (i + j);
                            }
                        }
                        out[m * n_rows + n] += acc;
                    }
                }
            }
        }
    }
    for m in 0..band_rows {
        for n in 0..n_rows {
            out[m * n_rows + n] +=
                correction_base - w.zero_point() * sum_a[n] - a.zero_point() * sum_w[m0 + m];
        }
    }
}

/// Integer matrix multiply of packed codes: `out[m, n]` is the signed dot
/// product of weight row `m` with activation row `n`, shape `[M, N]`. Both
/// operands carry their own zero point; the stored-offset corrections are
/// applied here, so results are true signed dot products.
pub fn gemm_bitserial(w: &Bitplanes, a: &Bitplanes, plan: &TilePlan) -> Result<IntTensor> {
    if w.cols() != a.cols() {
        return Err(Error::Shape(format!(
            "weight rows have {} columns, activation rows have {}",
            w.cols(),
            a.cols()
        )));
    }
    let m_rows = w.rows();
    let n_rows = a.rows();
    let sum_w = row_code_sums(w);
    let sum_a = row_code_sums(a);
    let mut out = vec![0i32; m_rows * n_rows];

    let workers = plan.workers.min(m_rows).max(1);
    if workers == 1 {
        gemm_band(w, a, 0, &mut out, plan, &sum_w, &sum_a);
    } else {
        // Contiguous bands of weight rows; each worker owns a disjoint
        // output slice, so accumulation never races and stays exact.
        let band = m_rows.div_ceil(workers);
        std::thread::scope(|s| {
            for (i, chunk) in out.chunks_mut(band * n_rows).enumerate() {
                let (sum_w, sum_a) = (&sum_w, &sum_a);
                s.spawn(move || gemm_band(w, a, i * band, chunk, plan, sum_w, sum_a));
            }
        });
    }
    IntTensor::from_vec(&[m_rows, n_rows], out)
}

// ── convolution lowering ───────────────────────────────────────────────────

/// Rearrange NCHW activation codes into a patch matrix of shape
/// `[n * oh * ow, c * kh * kw]`. Padding positions hold code zero, which is
/// exact because unsigned activation codes map zero to zero.
pub fn im2col_codes(input: &IntTensor, p: &ConvParams) -> Result<IntTensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = p.out_dims(h, w)?;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let x = input.data();

    let mut patches = vec![0i32; n * oh * ow * c * kh * kw];
    let patch_len = c * kh * kw;
    for bn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bn * oh + oy) * ow + ox;
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
                            patches[row * patch_len + (ic * kh + ky) * kw + kx] =
                                x[((bn * c + ic) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    IntTensor::from_vec(&[n * oh * ow, patch_len], patches)
}

/// Borrowed view of packed weights plus the per-row scales and bias needed
/// to turn integer dot products back into FP32.
#[derive(Debug, Clone, Copy)]
pub struct PackedWeights<'a> {
    pub planes: &'a Bitplanes,
    pub scales: &'a [f32],
    pub bias: Option<&'a [f32]>,
}

impl PackedWeights<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != self.planes.rows() {
            return Err(Error::Shape(format!(
                "{} scales for {} packed rows",
                self.scales.len(),
                self.planes.rows()
            )));
        }
        if let Some(b) = self.bias {
            if b.len() != self.planes.rows() {
                return Err(Error::Shape(format!(
                    "{} bias entries for {} packed rows",
                    b.len(),
                    self.planes.rows()
                )));
            }
        }
        Ok(())
    }
}

/// Bitserial convolution: quantized NCHW activation codes against packed
/// OIHW weights flattened to `[o, c * kh * kw]` rows. Output is FP32 NCHW,
/// each dot product rescaled by `a_scale * scales[o]`, with optional fused
/// relu.
pub fn conv2d_bitserial(
    input_codes: &IntTensor,
    a_bits: u8,
    a_scale: f32,
    weights: PackedWeights<'_>,
    p: &ConvParams,
    fuse_relu: bool,
    plan: &TilePlan,
) -> Result<Tensor> {
    weights.validate()?;
    let (n, c, h, w) = input_codes.dims4()?;
    let (kh, kw) = p.kernel;
    if weights.planes.cols() != c * kh * kw {
        return Err(Error::Shape(format!(
            "packed weight rows have {} columns, lowering needs {}",
            weights.planes.cols(),
            c * kh * kw
        )));
    }
    let (oh, ow) = p.out_dims(h, w)?;
    let o = weights.planes.rows();

    let patches = im2col_codes(input_codes, p)?;
    let packed = crate::bitpack::pack_bitplanes(&patches, a_bits, 0)?;
    let acc = gemm_bitserial(weights.planes, &packed, plan)?;

    // acc is [o, n*oh*ow] with patch columns in (n, oy, ox) order.
    let patches_per_image = oh * ow;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for bn in 0..n {
        for oc in 0..o {
            let scale = a_scale * weights.scales[oc];
            let bias = weights.bias.map_or(0.0, |b| b[oc]);
            for pix in 0..patches_per_image {
                let col = bn * patches_per_image + pix;
                let mut v = acc.data()[oc * n * patches_per_image + col] as f32 * scale + bias;
                if fuse_relu {
                    v = v.max(0.0);
                }
                out[(bn * o + oc) * patches_per_image + pix] = v;
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], Layout::Nchw, out)
}

/// Bitserial dense layer over `[n, k]` activation codes.
pub fn dense_bitserial(
    input_codes: &IntTensor,
    a_bits: u8,
    a_scale: f32,
    weights: PackedWeights<'_>,
    plan: &TilePlan,
) -> Result<Tensor> {
    weights.validate()?;
    let (n, k) = input_codes.dims2()?;
    if weights.planes.cols() != k {
        return Err(Error::Shape(format!(
            "packed weight rows have {} columns, input rows have {}",
            weights.planes.cols(),
            k
        )));
    }
    let packed = crate::bitpack::pack_bitplanes(input_codes, a_bits, 0)?;
    let acc = gemm_bitserial(weights.planes, &packed, plan)?;
    let m = weights.planes.rows();
    let mut out = vec![0.0f32; n * m];
    for row in 0..n {
        for col in 0..m {
            out[row * m + col] = acc.data()[col * n + row] as f32
                * (a_scale * weights.scales[col])
                + weights.bias.map_or(0.0, |b| b[col]);
        }
    }
    Tensor::from_vec(&[n, m], Layout::RowMajor2d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::pack_bitplanes;
    use crate::ops::conv2d_f32;
    use rand_core::{RngCore, SeedableRng};

    fn pack_row(codes: Vec<i32>, bits: u8, zero_point: i32) -> Bitplanes {
        let n = codes.len();
        pack_bitplanes(&IntTensor::from_vec(&[1, n], codes).unwrap(), bits, zero_point).unwrap()
    }

    fn planes_of(p: &Bitplanes, row: usize) -> Vec<&[u64]> {
        (0..p.bits() as usize).map(|i| p.plane_row(i, row)).collect()
    }

    #[test]
    fn one_bit_dot_is_popcount_of_and() {
        assert_eq!(dot_1bit(&[0b1101], &[0b0111]), 2);
        assert_eq!(dot_1bit(&[u64::MAX], &[u64::MAX]), 64);
        assert_eq!(dot_1bit(&[0], &[u64::MAX]), 0);
    }

    #[test]
    fn multibit_dot_hand_case() {
        // codes w = [1, 2], a = [3, 1]: 1*3 + 2*1 = 5
        let w = pack_row(vec![1, 2], 2, 0);
        let a = pack_row(vec![3, 1], 2, 0);
        assert_eq!(dot_multibit(&planes_of(&w, 0), &planes_of(&a, 0)), 5);
    }

    #[test]
    fn corrected_dot_hand_case() {
        // signed weights [-1, 1] stored offset by 2 as [1, 3]; a = [3, 1]
        // raw 1*3 + 3*1 = 6, minus 2 * (3 + 1) = 8, gives -2
        let w = pack_row(vec![-1, 1], 2, 2);
        let a = pack_row(vec![3, 1], 2, 0);
        assert_eq!(
            dot_corrected(&planes_of(&w, 0), &planes_of(&a, 0), w.zero_point()),
            -2
        );
    }

    #[test]
    fn corrected_dot_zero_activations() {
        let w = pack_row(vec![-2, 1, -1, 0], 2, 2);
        let a = pack_row(vec![0, 0, 0, 0], 2, 0);
        assert_eq!(
            dot_corrected(&planes_of(&w, 0), &planes_of(&a, 0), 2),
            0
        );
    }

    #[test]
    fn weighted_popcount_sums_codes() {
        let a = pack_row(vec![3, 1, 2, 0, 3], 2, 0);
        assert_eq!(weighted_popcount(&planes_of(&a, 0)), 9);
    }

    #[test]
    fn multibit_dot_matches_integer_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..60 {
            let wb = 1 + (trial % 3) as u8;
            let ab = 1 + ((trial / 3) % 3) as u8;
            let k = 1 + (rng.next_u32() % 200) as usize;
            let wc: Vec<i32> = (0..k).map(|_| (rng.next_u32() as i32).rem_euclid(1 << wb)).collect();
            let ac: Vec<i32> = (0..k).map(|_| (rng.next_u32() as i32).rem_euclid(1 << ab)).collect();
            let oracle: i32 = wc.iter().zip(&ac).map(|(x, y)| x * y).sum();
            let w = pack_row(wc, wb, 0);
            let a = pack_row(ac, ab, 0);
            assert_eq!(
                dot_multibit(&planes_of(&w, 0), &planes_of(&a, 0)),
                oracle,
                "trial {} k {}",
                trial,
                k
            );
        }
    }

    #[test]
    fn corrected_dot_matches_signed_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(78);
        for trial in 0..60 {
            let wb = 1 + (trial % 3) as u8;
            let zp = 1 << (wb - 1);
            let k = 1 + (rng.next_u32() % 150) as usize;
            let wc: Vec<i32> = (0..k)
                .map(|_| (rng.next_u32() as i32).rem_euclid(1 << wb) - zp)
                .collect();
            let ac: Vec<i32> = (0..k).map(|_| (rng.next_u32() as i32).rem_euclid(4)).collect();
            let oracle: i32 = wc.iter().zip(&ac).map(|(x, y)| x * y).sum();
            let w = pack_row(wc, wb, zp);
            let a = pack_row(ac, 2, 0);
            assert_eq!(
                dot_corrected(&planes_of(&w, 0), &planes_of(&a, 0), zp),
                oracle,
                "trial {}",
                trial
            );
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn avx2_backend_matches_portable() {
        if !std::arch::is_x86_feature_detected!("avx2") {
            return;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        for len in [0usize, 1, 3, 4, 5, 7, 8, 31, 64, 100] {
            let w: Vec<u64> = (0..len)
                .map(|_| (rng.next_u32() as u64) << 32 | rng.next_u32() as u64)
                .collect();
            let a: Vec<u64> = (0..len)
                .map(|_| (rng.next_u32() as u64) << 32 | rng.next_u32() as u64)
                .collect();
            assert_eq!(
                avx2::and_popcount(&w, &a),
                and_popcount_portable(&w, &a),
                "len {}",
                len
            );
        }
    }

    #[test]
    fn tile_plan_fills_l1_budget() {
        let plan = make_tile_plan(64, 64, 64, 4, 32 * 1024).unwrap();
        assert_eq!(plan, TilePlan { tile_m: 8, tile_n: 8, tile_k: 64, workers: 4 });
    }

    #[test]
    fn tile_plan_clamps_small_dims_and_budget() {
        let plan = make_tile_plan(3, 2, 500, 1, 64).unwrap();
        assert_eq!((plan.tile_m, plan.tile_n), (3, 2));
        assert!(plan.tile_k >= 1 && plan.tile_k <= 500);
        assert!(matches!(
            make_tile_plan(8, 8, 8, 1, 0),
            Err(Error::Config(_))
        ));
    }

    fn gemm_oracle(w: &IntTensor, a: &IntTensor) -> Vec<i32> {
        let (m, k) = w.dims2().unwrap();
        let (n, _) = a.dims2().unwrap();
        let mut out = vec![0i32; m * n];
        for mm in 0..m {
            for nn in 0..n {
                out[mm * n + nn] = (0..k)
                    .map(|kk| w.data()[mm * k + kk] * a.data()[nn * k + kk])
                    .sum();
            }
        }
        out
    }

    #[test]
    fn gemm_scalar_case() {
        let w = pack_row(vec![1], 1, 0);
        let a = pack_row(vec![1], 1, 0);
        let got = gemm_bitserial(&w, &a, &TilePlan::default()).unwrap();
        assert_eq!(got.shape(), &[1, 1]);
        assert_eq!(got.data(), &[1]);
    }

    #[test]
    fn gemm_matches_oracle_and_is_plan_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
        for trial in 0..25 {
            let wb = 1 + (trial % 3) as u8;
            let ab = 1 + ((trial / 3) % 3) as u8;
            let zp = 1 << (wb - 1);
            let m = 1 + (rng.next_u32() % 20) as usize;
            let n = 1 + (rng.next_u32() % 20) as usize;
            let k = 1 + (rng.next_u32() % 150) as usize;
            let wc: Vec<i32> = (0..m * k)
                .map(|_| (rng.next_u32() as i32).rem_euclid(1 << wb) - zp)
                .collect();
            let ac: Vec<i32> = (0..n * k)
                .map(|_| (rng.next_u32() as i32).rem_euclid(1 << ab))
                .collect();
            let wt = IntTensor::from_vec(&[m, k], wc).unwrap();
            let at = IntTensor::from_vec(&[n, k], ac).unwrap();
            let w = pack_bitplanes(&wt, wb, zp).unwrap();
            let a = pack_bitplanes(&at, ab, 0).unwrap();
            let oracle = gemm_oracle(&wt, &at);

            let base = gemm_bitserial(
                &w,
                &a,
                &make_tile_plan(m, n, w.words_per_row(), 1, 32768).unwrap(),
            )
            .unwrap();
            assert_eq!(base.data(), &oracle[..], "trial {}", trial);
            assert_eq!(base.shape(), &[m, n]);

            // different tiling and worker counts must be bitwise identical
            for plan in [
                TilePlan { tile_m: 1, tile_n: 1, tile_k: 1, workers: 1 },
                TilePlan { tile_m: 3, tile_n: 5, tile_k: 2, workers: 2 },
                TilePlan { tile_m: 8, tile_n: 8, tile_k: 256, workers: 4 },
            ] {
                let got = gemm_bitserial(&w, &a, &plan).unwrap();
                assert_eq!(got.data(), base.data(), "trial {} plan {:?}", trial, plan);
            }
        }
    }

    #[test]
    fn gemm_rejects_mismatched_k() {
        let w = pack_bitplanes(&IntTensor::zeros(&[2, 10]).unwrap(), 1, 0).unwrap();
        let a = pack_bitplanes(&IntTensor::zeros(&[2, 11]).unwrap(), 1, 0).unwrap();
        let plan = TilePlan::default();
        assert!(matches!(gemm_bitserial(&w, &a, &plan), Err(Error::Shape(_))));
    }

    #[test]
    fn im2col_patch_layout() {
        // 3x3 input 1..9, 2x2 kernel, stride 1, no padding
        let x = IntTensor::from_vec(&[1, 1, 3, 3], (1..=9).collect()).unwrap();
        let p = ConvParams::new((1, 1), (0, 0), (2, 2));
        let patches = im2col_codes(&x, &p).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        assert_eq!(
            patches.data(),
            &[1, 2, 4, 5, 2, 3, 5, 6, 4, 5, 7, 8, 5, 6, 8, 9]
        );
    }

    #[test]
    fn im2col_identity_lowering() {
        // 1x1 kernel, stride 1, pad 0: pixel-major copy with channels along rows
        let x = IntTensor::from_vec(&[1, 2, 2, 2], (1..=8).collect()).unwrap();
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        let patches = im2col_codes(&x, &p).unwrap();
        assert_eq!(patches.shape(), &[4, 2]);
        assert_eq!(patches.data(), &[1, 5, 2, 6, 3, 7, 4, 8]);
    }

    #[test]
    fn im2col_pads_with_zero_codes() {
        let x = IntTensor::from_vec(&[1, 1, 2, 2], vec![1, 2, 3, 4]).unwrap();
        let p = ConvParams::new((1, 1), (1, 1), (3, 3));
        let patches = im2col_codes(&x, &p).unwrap();
        assert_eq!(patches.shape(), &[4, 9]);
        // top-left output: only the bottom-right 2x2 of the kernel overlaps
        assert_eq!(patches.data()[..9], [0, 0, 0, 0, 1, 2, 0, 3, 4]);
    }

    #[test]
    fn conv_bitserial_identity() {
        // 1x1 kernel with weight code +1 and unit scales reproduces the
        // dequantized input channel.
        let x = IntTensor::from_vec(&[1, 1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        let planes =
            pack_bitplanes(&IntTensor::from_vec(&[1, 1], vec![1]).unwrap(), 2, 2).unwrap();
        let weights = PackedWeights { planes: &planes, scales: &[1.0], bias: None };
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        let y = conv2d_bitserial(&x, 2, 1.0, weights, &p, false, &TilePlan::default()).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_bitserial_fused_relu_floors_at_zero() {
        let x = IntTensor::from_vec(&[1, 1, 2, 2], vec![1, 2, 3, 0]).unwrap();
        let planes =
            pack_bitplanes(&IntTensor::from_vec(&[1, 1], vec![1]).unwrap(), 2, 2).unwrap();
        let weights = PackedWeights { planes: &planes, scales: &[1.0], bias: Some(&[-100.0]) };
        let p = ConvParams::new((1, 1), (0, 0), (1, 1));
        let y = conv2d_bitserial(&x, 2, 1.0, weights, &p, true, &TilePlan::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = conv2d_bitserial(&x, 2, 1.0, weights, &p, false, &TilePlan::default()).unwrap();
        assert!(y.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn conv_bitserial_matches_f32_on_dequantized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(140);
        for trial in 0..8 {
            let (n, c, o, h, w) = (1 + trial % 2, 3, 4, 7, 6);
            let stride = 1 + trial % 2;
            let pad = trial % 2;
            let p = ConvParams::new((stride, stride), (pad, pad), (3, 3));
            let a_bits = 2u8;
            let w_bits = 2u8;
            let zp = 1 << (w_bits - 1);
            let a_scale = 0.25f32;

            let acodes: Vec<i32> = (0..n * c * h * w)
                .map(|_| (rng.next_u32() as i32).rem_euclid(1 << a_bits))
                .collect();
            let wcodes: Vec<i32> = (0..o * c * 9)
                .map(|_| (rng.next_u32() as i32).rem_euclid(1 << w_bits) - zp)
                .collect();
            let scales: Vec<f32> = (0..o).map(|i| 0.1 + 0.05 * i as f32).collect();
            let bias: Vec<f32> = (0..o).map(|i| i as f32 * 0.3 - 0.5).collect();

            let input = IntTensor::from_vec(&[n, c, h, w], acodes.clone()).unwrap();
            let packed_w = pack_bitplanes(
                &IntTensor::from_vec(&[o, c * 9], wcodes.clone()).unwrap(),
                w_bits,
                zp,
            )
            .unwrap();
            let weights = PackedWeights {
                planes: &packed_w,
                scales: &scales,
                bias: Some(&bias),
            };
            let got = conv2d_bitserial(
                &input,
                a_bits,
                a_scale,
                weights,
                &p,
                false,
                &TilePlan::default(),
            )
            .unwrap();

            // oracle: scalar f32 conv over the dequantized values
            let x = Tensor::from_vec(
                &[n, c, h, w],
                Layout::Nchw,
                acodes.iter().map(|&v| v as f32 * a_scale).collect(),
            )
            .unwrap();
            let wt = Tensor::from_vec(
                &[o, c, 3, 3],
                Layout::Nchw,
                wcodes
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v as f32 * scales[i / (c * 9)])
                    .collect(),
            )
            .unwrap();
            let want = conv2d_f32(&x, &wt, Some(&bias), &p).unwrap();
            assert!(
                got.allclose(&want, 1e-4, 1e-5).unwrap(),
                "trial {} diverged",
                trial
            );
        }
    }

    #[test]
    fn dense_bitserial_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(141);
        let (n, m, k) = (3, 5, 70);
        let acodes: Vec<i32> = (0..n * k).map(|_| (rng.next_u32() as i32).rem_euclid(8)).collect();
        let wcodes: Vec<i32> = (0..m * k)
            .map(|_| (rng.next_u32() as i32).rem_euclid(8) - 4)
            .collect();
        let scales: Vec<f32> = (0..m).map(|i| 0.05 + 0.01 * i as f32).collect();

        let input = IntTensor::from_vec(&[n, k], acodes.clone()).unwrap();
        let planes =
            pack_bitplanes(&IntTensor::from_vec(&[m, k], wcodes.clone()).unwrap(), 3, 4).unwrap();
        let weights = PackedWeights { planes: &planes, scales: &scales, bias: None };
        let got = dense_bitserial(&input, 3, 0.5, weights, &TilePlan::default()).unwrap();

        let x = Tensor::from_vec(
            &[n, k],
            Layout::RowMajor2d,
            acodes.iter().map(|&v| v as f32 * 0.5).collect(),
        )
        .unwrap();
        let wt = Tensor::from_vec(
            &[m, k],
            Layout::RowMajor2d,
            wcodes
                .iter()
                .enumerate()
                .map(|(i, &v)| v as f32 * scales[i / k])
                .collect(),
        )
        .unwrap();
        let want = crate::ops::dense_f32(&x, &wt, None).unwrap();
        assert!(got.allclose(&want, 1e-4, 1e-5).unwrap());
    }
}
