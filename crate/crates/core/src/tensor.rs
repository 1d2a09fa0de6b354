//! Dense row-major FP32 tensors and the handful of linear-algebra
//! primitives the rest of the crate is built from.
//!
//! Every operation is pure. Matrix products accumulate in FP32 with the
//! reduction index ascending, and parallel execution only ever splits
//! independent output rows, so results are bit-identical for any thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (in multiply-adds) below which matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "every dimension must be at least 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// 1-D tensor. Unlike [`Tensor::new`] this accepts an empty vector so
    /// callers can represent "no data" (which reductions then reject).
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Shape as `(rows, cols)`, or a dimension error for anything but 2-D.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a 2-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!("expected a 4-D tensor, got {:?}", self.shape))),
        }
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if start >= end || end > lead {
            return Err(Error::arg(format!("row range {start}..{end} outside 0..{lead}")));
        }
        let stride = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers rows of the leading dimension in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let lead = self.shape[0];
        let stride = self.numel() / lead;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(Error::arg(format!("row {r} outside 0..{lead}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// `(min, max)` over all elements.
    pub fn minmax(&self) -> Result<(f32, f32)> {
        let mut it = self.data.iter().copied();
        let first = it
            .next()
            .ok_or_else(|| Error::arg("minmax of an empty tensor"))?;
        Ok(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new([m, n], out)
}

/// Row-major `out[m×n] = a[m×k] · b[k×n]`; `out` must be zeroed.
///
/// The loop order is i-p-j: each output element still accumulates its
/// products with `p` ascending, but the innermost loop streams a row of
/// `b` so it vectorizes across `j` without reordering any sum.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c = a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(format!(
            "matmul_nt of {:?} and {:?}: shared dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

/// `c = aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(&a.transpose()?, b)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::arg(format!(
                    "conv2d output size is not a positive integer: \
                     ({size} + 2*{padding} - {k}) / {stride} + 1"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: out(height, kernel_h)?,
            out_w: out(width, kernel_w)?,
        })
    }

    /// Rows of the unfolded patch matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output pixel `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when the tap falls in the zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one `[C×H×W]` image into a `[C·kh·kw × H'·W']` patch matrix.
/// Padded taps take `pad_value`.
pub fn im2col<T: Copy>(image: &[T], g: &ConvGeometry, pad_value: T) -> Vec<T> {
    let pixels = g.out_pixels();
    let mut cols = vec![pad_value; g.patch_len() * pixels];
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let pixels = g.out_pixels();
    let mut image = vec![0.0f32; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            image[(c * g.height + y) * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    image
}

/// Cross-correlation of `input: [N×C×H×W]` with `kernel: [O×C×kh×kw]`,
/// symmetric zero padding, computed as im2col followed by matmul.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if c != kc {
        return Err(Error::dim(format!(
            "conv2d input {:?} has {c} channels but kernel {:?} expects {kc}",
            input.shape, kernel.shape
        )));
    }
    let g = ConvGeometry::new((c, h, w), (kh, kw), stride, padding)?;
    let image_len = c * h * w;
    let out_len = o * g.out_pixels();
    let mut out = vec![0.0f32; n * out_len];
    for (img, dst) in input.data.chunks(image_len).zip(out.chunks_mut(out_len)) {
        let cols = im2col(img, &g, 0.0);
        matmul_into(&kernel.data, &cols, dst, o, g.patch_len(), g.out_pixels());
    }
    Tensor::new([n, o, g.out_h, g.out_w], out)
}
