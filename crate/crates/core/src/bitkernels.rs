//! Bit-packed sign tensors, XNOR/popcount binary GEMM and integer GEMM
//! with 32-bit accumulation.
//!
//! Sign encoding: `+1 → 1`, `−1 → 0`, LSB-first within each 64-bit word,
//! `ceil(cols / 64)` words per row. Padding bits past `cols` are always
//! zero, so XOR over a padded word never reports a spurious mismatch.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{QTensor, Scheme};
use crate::tensor::Tensor;

pub const WORD_BITS: usize = 64;

/// Output rows below which kernels stay on the calling thread.
const PAR_MIN_ROWS: usize = 8;

#[inline]
pub fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// Wraps packed words, rejecting wrong lengths or non-zero padding.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = words_per_row(cols);
        if rows == 0 || cols == 0 || words.len() != rows * wpr {
            return Err(Error::dim(format!(
                "{rows}×{cols} bit tensor needs {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let mask = tail_mask(cols);
        if let Some(r) = (0..rows).find(|r| words[r * wpr + wpr - 1] & !mask != 0) {
            return Err(Error::arg(format!("row {r} has non-zero padding bits")));
        }
        Ok(BitTensor { rows, cols, words })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        words_per_row(self.cols)
    }

    pub fn row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    /// Payload bytes of the packed words.
    pub fn storage_bytes(&self) -> usize {
        self.words.len() * 8
    }

    /// Blob layout: `rows`, `cols` as u64 LE, then the words row-major LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.storage_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses a blob produced by [`BitTensor::to_bytes`]. Format errors
    /// report offsets relative to `base`.
    pub fn from_bytes(bytes: &[u8], base: u64) -> Result<Self> {
        let read_u64 = |at: usize| -> Result<u64> {
            bytes
                .get(at..at + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(base + at as u64, "bit blob truncated"))
        };
        let rows = read_u64(0)? as usize;
        let cols = read_u64(8)? as usize;
        let n_words = rows
            .checked_mul(words_per_row(cols))
            .ok_or_else(|| Error::format(base, "bit blob dimensions overflow"))?;
        let expected = 16 + n_words * 8;
        if bytes.len() != expected {
            return Err(Error::format(
                base + bytes.len().min(expected) as u64,
                format!("bit blob of {rows}×{cols} needs {expected} bytes, got {}", bytes.len()),
            ));
        }
        let words = bytes[16..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        BitTensor::from_words(rows, cols, words).map_err(|e| Error::format(base, e.to_string()))
    }
}

/// Packs the signs of a 2-D tensor (`x ≥ 0 → 1`).
pub fn pack_bits(x: &Tensor) -> Result<BitTensor> {
    let (rows, cols) = x.dims2()?;
    Ok(pack_rows(x.data(), rows, cols))
}

pub(crate) fn pack_rows(data: &[f32], rows: usize, cols: usize) -> BitTensor {
    let wpr = words_per_row(cols);
    let mut words = vec![0u64; rows * wpr];
    for (r, src) in data.chunks_exact(cols).enumerate() {
        let dst = &mut words[r * wpr..(r + 1) * wpr];
        for (w, chunk) in dst.iter_mut().zip(src.chunks(WORD_BITS)) {
            *w = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (((v >= 0.0) as u64) << i));
        }
    }
    BitTensor { rows, cols, words }
}

pub fn unpack_bits(b: &BitTensor) -> Tensor {
    let wpr = b.words_per_row();
    let mut data = Vec::with_capacity(b.rows * b.cols);
    for r in 0..b.rows {
        let row = &b.words[r * wpr..(r + 1) * wpr];
        data.extend((0..b.cols).map(|c| {
            if (row[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        }));
    }
    Tensor::new([b.rows, b.cols], data).expect("non-empty bit tensor")
}

/// Dense `i32` matrix produced by the integer kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.rows, self.cols], self.data.iter().map(|&v| v as f32).collect())
            .expect("non-empty matrix")
    }
}

#[inline(always)]
fn xnor_row_body(a_row: &[u64], b_words: &[u64], wpr: usize, k: i32, out: &mut [i32]) {
    for (o, b_row) in out.iter_mut().zip(b_words.chunks_exact(wpr)) {
        let mismatches: u32 = a_row.iter().zip(b_row).map(|(x, y)| (x ^ y).count_ones()).sum();
        *o = k - 2 * mismatches as i32;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xnor_row_popcnt(a_row: &[u64], b_words: &[u64], wpr: usize, k: i32, out: &mut [i32]) {
    xnor_row_body(a_row, b_words, wpr, k, out)
}

fn xnor_row(a_row: &[u64], b_words: &[u64], wpr: usize, k: i32, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { xnor_row_popcnt(a_row, b_words, wpr, k, out) };
    }
    xnor_row_body(a_row, b_words, wpr, k, out)
}

/// Binary GEMM: `c[i][j] = k − 2·popcount(a_i XOR b_j)`, equal to the dot
/// product of the corresponding ±1 vectors; `b_t` holds the columns of the
/// logical right operand as rows.
pub fn xnor_gemm(a: &BitTensor, b_t: &BitTensor) -> Result<IntMatrix> {
    if a.cols != b_t.cols {
        return Err(Error::dim(format!(
            "xnor_gemm of {}×{} and ({}×{})ᵀ: shared dimension differs",
            a.rows, a.cols, b_t.rows, b_t.cols
        )));
    }
    let (m, n, wpr) = (a.rows, b_t.rows, a.words_per_row());
    let k = i32::try_from(a.cols).map_err(|_| Error::arg("xnor_gemm k exceeds i32"))?;
    let mut data = vec![0i32; m * n];
    let row = |(i, out): (usize, &mut [i32])| xnor_row(a.row(i), &b_t.words, wpr, k, out);
    if m >= PAR_MIN_ROWS {
        data.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        data.chunks_mut(n).enumerate().for_each(row);
    }
    Ok(IntMatrix { rows: m, cols: n, data })
}

/// Zero-point-free integer operand: `x[r][c] = values[r][c] · row_scale[r]`.
///
/// Paper-literal codes are used as-is with scale `Δ`. Symmetric codes
/// `c ∈ [0, 2^b − 1]` reconstruct to `cΔ − u = (2c − (2^b − 1))·Δ/2`, so they
/// are stored as the odd integers `2c − (2^b − 1)` with scale `Δ/2`. A
/// stored value of 0 is an exact zero contribution, which lets im2col pad
/// with it.
#[derive(Clone, Debug, PartialEq)]
pub struct IntOperand {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i16>,
    pub row_scale: Vec<f32>,
}

impl IntOperand {
    /// Operand from a 2-D QTensor whose rows are the output dimension
    /// (per-tensor or per-channel along axis 0).
    pub fn from_rows(q: &QTensor) -> Result<Self> {
        let (rows, cols) = match q.shape() {
            &[r, c] => (r, c),
            s => return Err(Error::dim(format!("integer operand must be 2-D, got {s:?}"))),
        };
        Self::build(q, rows, cols, false)
    }

    /// Operand holding the transpose of a 2-D QTensor (per-tensor or
    /// per-channel along axis 1).
    pub fn from_cols(q: &QTensor) -> Result<Self> {
        let (rows, cols) = match q.shape() {
            &[r, c] => (c, r),
            s => return Err(Error::dim(format!("integer operand must be 2-D, got {s:?}"))),
        };
        Self::build(q, rows, cols, true)
    }

    fn build(q: &QTensor, rows: usize, cols: usize, transposed: bool) -> Result<Self> {
        let params = q.params();
        let scheme = params.scheme();
        if !scheme.is_zero_point_free() {
            return Err(Error::UnsupportedScheme(format!(
                "integer GEMM needs paper-literal or symmetric operands, got {scheme}; \
                 dequantize and use the FP32 matmul instead"
            )));
        }
        let row_axis = if transposed { 1 } else { 0 };
        let per_row = match params.granularity() {
            crate::quant::Granularity::PerTensor => false,
            crate::quant::Granularity::PerChannel { axis } if axis == row_axis => true,
            crate::quant::Granularity::PerChannel { axis } => {
                return Err(Error::UnsupportedScheme(format!(
                    "per-channel scales along axis {axis} lie on the reduction dimension"
                )))
            }
        };
        let max_code = (1i32 << params.bits()) - 1;
        let centered = |c: i32| -> i32 {
            match scheme {
                Scheme::Symmetric => 2 * c - max_code,
                _ => c,
            }
        };
        let range_scale = |r: &crate::quant::QuantRange| match scheme {
            Scheme::Symmetric => r.delta() / 2.0,
            _ => r.delta(),
        };
        let row_scale = (0..rows)
            .map(|r| range_scale(&params.ranges()[if per_row { r } else { 0 }]))
            .collect();
        let codes = q.codes();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let code = if transposed { codes[c * rows + r] } else { codes[r * cols + c] };
                let v = centered(code);
                values.push(i16::try_from(v).map_err(|_| {
                    Error::arg(format!("code {code} does not fit the 16-bit integer kernel"))
                })?);
            }
        }
        Ok(IntOperand {
            rows,
            cols,
            values,
            row_scale,
        })
    }

    fn max_abs(&self) -> i64 {
        self.values.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0)
    }
}

#[inline(always)]
fn dot_i16_body(a: &[i16], b: &[i16]) -> i32 {
    // Overflow is ruled out by the caller's magnitude bound.
    a.iter().zip(b).fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32))
}

#[inline(always)]
fn int_row_body(a_row: &[i16], b_t: &[i16], k: usize, scale: f32, b_scale: &[f32], out: &mut [f32]) {
    for ((o, b_row), &sb) in out.iter_mut().zip(b_t.chunks_exact(k)).zip(b_scale) {
        *o = dot_i16_body(a_row, b_row) as f32 * scale * sb;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn int_row_avx2(a_row: &[i16], b_t: &[i16], k: usize, scale: f32, b_scale: &[f32], out: &mut [f32]) {
    int_row_body(a_row, b_t, k, scale, b_scale, out)
}

fn int_row(a_row: &[i16], b_t: &[i16], k: usize, scale: f32, b_scale: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { int_row_avx2(a_row, b_t, k, scale, b_scale, out) };
    }
    int_row_body(a_row, b_t, k, scale, b_scale, out)
}

/// `out[i][j] = (Σ_p a[i][p]·b_t[j][p]) · a.row_scale[i] · b_t.row_scale[j]`
/// with exact 32-bit integer accumulation.
pub fn int_gemm_nt(a: &IntOperand, b_t: &IntOperand) -> Result<Tensor> {
    if a.cols != b_t.cols {
        return Err(Error::dim(format!(
            "integer GEMM of {}×{} and ({}×{})ᵀ: shared dimension differs",
            a.rows, a.cols, b_t.rows, b_t.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b_t.rows);
    // Accumulators are plain i32: reject shapes that could overflow.
    if (k as i64) * a.max_abs() * b_t.max_abs() > i32::MAX as i64 {
        return Err(Error::arg(format!(
            "k = {k} with code magnitudes {} and {} may overflow the 32-bit accumulator",
            a.max_abs(),
            b_t.max_abs()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let row = |(i, dst): (usize, &mut [f32])| {
        int_row(&a.values[i * k..(i + 1) * k], &b_t.values, k, a.row_scale[i], &b_t.row_scale, dst)
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

/// Integer GEMM of `a: [m×k]` and `b: [k×n]` QTensors. `b` may be
/// per-channel along its output axis (1).
pub fn int8_gemm(a: &QTensor, b: &QTensor) -> Result<Tensor> {
    check_inner(a, b.shape().first().copied())?;
    int_gemm_nt(&IntOperand::from_rows(a)?, &IntOperand::from_cols(b)?)
}

/// As [`int8_gemm`] with the right operand supplied transposed as
/// `b_t: [n×k]` (per-channel along axis 0), the layout of linear weights.
pub fn int8_gemm_nt(a: &QTensor, b_t: &QTensor) -> Result<Tensor> {
    check_inner(a, b_t.shape().get(1).copied())?;
    int_gemm_nt(&IntOperand::from_rows(a)?, &IntOperand::from_rows(b_t)?)
}

fn check_inner(a: &QTensor, other_k: Option<usize>) -> Result<()> {
    if a.shape().len() == 2 && other_k.is_some() && a.shape().get(1).copied() != other_k {
        return Err(Error::dim(format!(
            "integer GEMM inner dimensions differ: {:?} vs k = {:?}",
            a.shape(),
            other_k
        )));
    }
    Ok(())
}
