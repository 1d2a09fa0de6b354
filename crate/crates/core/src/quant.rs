//! Uniform b-bit quantization, dequantization, fake quantization, sign
//! binarization and range calibration.
//!
//! A range `(l, u)` quantized at `b` bits is split into `2^b − 1` intervals
//! of length `Δ = (u − l) / (2^b − 1)`. Three reconstruction grids are
//! offered:
//!
//! * [`Scheme::PaperLiteral`]: `code = round(x / Δ)`, `x̂ = code · Δ`. No
//!   zero point; the grid is the multiples of `Δ` nearest to `[l, u]`.
//! * [`Scheme::Affine`]: `code = round((x − l) / Δ)`, `x̂ = code · Δ + l`.
//!   Codes span `[0, 2^b − 1]` and both endpoints are grid points.
//! * [`Scheme::Symmetric`]: affine with `l = −u`, used for weights.
//!
//! Inputs are always clamped to `[l, u]` before rounding, and rounding is
//! half-away-from-zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    PaperLiteral,
    Affine,
    Symmetric,
}

impl Scheme {
    /// Whether integer kernels can multiply codes directly (no zero point
    /// that would need cross terms).
    pub fn is_zero_point_free(self) -> bool {
        matches!(self, Scheme::PaperLiteral | Scheme::Symmetric)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::PaperLiteral => "paper-literal",
            Scheme::Affine => "affine",
            Scheme::Symmetric => "symmetric",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(Scheme::PaperLiteral),
            "affine" => Ok(Scheme::Affine),
            "symmetric" => Ok(Scheme::Symmetric),
            other => Err(Error::arg(format!(
                "unknown scheme `{other}` (expected paper-literal, affine or symmetric)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Granularity {
    #[default]
    PerTensor,
    PerChannel { axis: usize },
}

fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

/// Interval length `(u − l) / (2^b − 1)`.
pub fn compute_delta(lower: f32, upper: f32, bits: u8) -> Result<f32> {
    check_bits(bits)?;
    // Also rejects NaN bounds.
    if !lower.is_finite() || !upper.is_finite() || lower >= upper {
        return Err(Error::Range { lower, upper });
    }
    Ok((upper - lower) / levels(bits) as f32)
}

/// Half-away-from-zero rounding (what `f64::round` does).
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// One `(l, u, Δ)` triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantRange {
    lower: f32,
    upper: f32,
    delta: f32,
    code_min: i32,
    code_max: i32,
}

impl QuantRange {
    fn new(lower: f32, upper: f32, bits: u8, scheme: Scheme) -> Result<Self> {
        let delta = compute_delta(lower, upper, bits)?;
        if scheme == Scheme::Symmetric && lower != -upper {
            return Err(Error::arg(format!(
                "symmetric scheme needs lower = -upper, got ({lower}, {upper})"
            )));
        }
        let (code_min, code_max) = match scheme {
            Scheme::Affine | Scheme::Symmetric => (0, levels(bits) as i32),
            Scheme::PaperLiteral => paper_literal_grid(lower, upper, delta, bits),
        };
        Ok(QuantRange {
            lower,
            upper,
            delta,
            code_min,
            code_max,
        })
    }

    pub fn lower(&self) -> f32 {
        self.lower
    }

    pub fn upper(&self) -> f32 {
        self.upper
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    /// Inclusive code bounds of the grid.
    pub fn code_bounds(&self) -> (i32, i32) {
        (self.code_min, self.code_max)
    }

    #[inline]
    fn quantize(&self, x: f32, scheme: Scheme) -> i32 {
        let x = x.clamp(self.lower, self.upper) as f64;
        let delta = self.delta as f64;
        let scaled = match scheme {
            Scheme::PaperLiteral => x / delta,
            Scheme::Affine | Scheme::Symmetric => (x - self.lower as f64) / delta,
        };
        (round_half_away(scaled) as i32).clamp(self.code_min, self.code_max)
    }

    #[inline]
    fn dequantize(&self, code: i32, scheme: Scheme) -> f32 {
        let delta = self.delta as f64;
        match scheme {
            Scheme::PaperLiteral => (code as f64 * delta) as f32,
            Scheme::Affine => (code as f64 * delta + self.lower as f64) as f32,
            // `c·Δ + l` with `l = −(2^b − 1)·Δ/2`; mirrored codes give
            // exactly negated values.
            Scheme::Symmetric => ((2 * code - self.code_max) as f64 * delta / 2.0) as f32,
        }
    }
}

/// Grid of the zero-point-free scheme: the integers nearest to `l/Δ` and
/// `u/Δ`, trimmed to at most `2^b` levels.
///
/// Clamping to `[ceil(l/Δ), floor(u/Δ)]` would leave gaps of almost a full
/// `Δ` at the ends whenever `l/Δ` is not integral, so the nearest integers
/// are used instead. When both ends round outward (ties, or float error)
/// the grid would have `2^b + 1` levels; the end whose bound is farther
/// from its rounded code is dropped, the upper one on a tie.
fn paper_literal_grid(lower: f32, upper: f32, delta: f32, bits: u8) -> (i32, i32) {
    let lo = lower as f64 / delta as f64;
    let hi = upper as f64 / delta as f64;
    let mut qmin = round_half_away(lo) as i32;
    let mut qmax = round_half_away(hi) as i32;
    let max_levels = 1i64 << bits;
    while (qmax as i64 - qmin as i64 + 1) > max_levels {
        let lo_gap = (lo - qmin as f64).abs();
        let hi_gap = (hi - qmax as f64).abs();
        if lo_gap > hi_gap {
            qmin += 1;
        } else {
            qmax -= 1;
        }
    }
    (qmin, qmax)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
    ranges: Vec<QuantRange>,
}

impl QuantParams {
    pub fn per_tensor(bits: u8, scheme: Scheme, lower: f32, upper: f32) -> Result<Self> {
        Ok(QuantParams {
            bits,
            scheme,
            granularity: Granularity::PerTensor,
            ranges: vec![QuantRange::new(lower, upper, bits, scheme)?],
        })
    }

    pub fn per_channel(bits: u8, scheme: Scheme, axis: usize, ranges: &[(f32, f32)]) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::arg("per-channel params need at least one channel"));
        }
        Ok(QuantParams {
            bits,
            scheme,
            granularity: Granularity::PerChannel { axis },
            ranges: ranges
                .iter()
                .map(|&(l, u)| QuantRange::new(l, u, bits, scheme))
                .collect::<Result<_>>()?,
        })
    }

    /// Builds params from `(l, u)` pairs under an explicit granularity.
    pub fn from_ranges(
        bits: u8,
        scheme: Scheme,
        granularity: Granularity,
        ranges: &[(f32, f32)],
    ) -> Result<Self> {
        match granularity {
            Granularity::PerTensor => match ranges {
                [(l, u)] => Self::per_tensor(bits, scheme, *l, *u),
                _ => Err(Error::arg(format!(
                    "per-tensor params need exactly one range, got {}",
                    ranges.len()
                ))),
            },
            Granularity::PerChannel { axis } => Self::per_channel(bits, scheme, axis, ranges),
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn ranges(&self) -> &[QuantRange] {
        &self.ranges
    }

    /// The single range of per-tensor params.
    pub fn range(&self) -> Result<&QuantRange> {
        match self.granularity {
            Granularity::PerTensor => Ok(&self.ranges[0]),
            Granularity::PerChannel { .. } => {
                Err(Error::arg("per-tensor range requested from per-channel params"))
            }
        }
    }

    pub fn bounds(&self) -> Vec<(f32, f32)> {
        self.ranges.iter().map(|r| (r.lower, r.upper)).collect()
    }

    /// Maps each flat element index of a tensor with `shape` to the index of
    /// the range that governs it.
    pub(crate) fn channel_map(&self, shape: &[usize]) -> Result<ChannelMap> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelMap { inner: 1, channels: 1 }),
            Granularity::PerChannel { axis } => {
                let channels = *shape.get(axis).ok_or_else(|| {
                    Error::dim(format!("channel axis {axis} out of range for shape {shape:?}"))
                })?;
                if channels != self.ranges.len() {
                    return Err(Error::dim(format!(
                        "shape {shape:?} has {channels} channels on axis {axis}, params have {}",
                        self.ranges.len()
                    )));
                }
                Ok(ChannelMap {
                    inner: shape[axis + 1..].iter().product(),
                    channels,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelMap {
    inner: usize,
    channels: usize,
}

impl ChannelMap {
    #[inline]
    pub(crate) fn channel(&self, index: usize) -> usize {
        (index / self.inner) % self.channels
    }
}

/// Integer codes together with the params that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    codes: Vec<i32>,
    shape: Vec<usize>,
    params: QuantParams,
}

impl QTensor {
    /// Wraps raw codes, checking them against the grid.
    pub fn from_codes(codes: Vec<i32>, shape: impl Into<Vec<usize>>, params: QuantParams) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != codes.len() || numel == 0 {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} codes, got {}",
                codes.len()
            )));
        }
        let map = params.channel_map(&shape)?;
        for (i, &c) in codes.iter().enumerate() {
            let (lo, hi) = params.ranges[map.channel(i)].code_bounds();
            if c < lo || c > hi {
                return Err(Error::arg(format!(
                    "code {c} at index {i} outside grid [{lo}, {hi}]"
                )));
            }
        }
        Ok(QTensor { codes, shape, params })
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QTensor> {
    let map = params.channel_map(x.shape())?;
    let scheme = params.scheme;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.ranges[map.channel(i)].quantize(v, scheme))
        .collect();
    Ok(QTensor {
        codes,
        shape: x.shape().to_vec(),
        params: params.clone(),
    })
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let map = q
        .params
        .channel_map(&q.shape)
        .expect("QTensor shape was validated against its params");
    let scheme = q.params.scheme;
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| q.params.ranges[map.channel(i)].dequantize(c, scheme))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("QTensor shape is non-empty")
}

/// `dequantize(quantize(x))` in one pass.
pub fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    let map = params.channel_map(x.shape())?;
    let scheme = params.scheme;
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = &params.ranges[map.channel(i)];
                r.dequantize(r.quantize(v, scheme), scheme)
            })
            .collect(),
    )
    .expect("shape preserved"))
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn binarize(x: &Tensor) -> Tensor {
    x.map(sign)
}

/// Per-slice `(min, max)` of `samples` under `granularity`.
fn observed_ranges(samples: &[Tensor], granularity: Granularity) -> Result<Vec<(f32, f32)>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Calibration("no calibration samples".into()))?;
    let channels = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => *first.shape().get(axis).ok_or_else(|| {
            Error::dim(format!("channel axis {axis} out of range for {:?}", first.shape()))
        })?,
    };
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); channels];
    for s in samples {
        let map = match granularity {
            Granularity::PerTensor => ChannelMap { inner: 1, channels: 1 },
            Granularity::PerChannel { axis } => {
                if s.shape().get(axis) != Some(&channels) {
                    return Err(Error::dim(format!(
                        "calibration sample {:?} does not have {channels} channels on axis {axis}",
                        s.shape()
                    )));
                }
                ChannelMap {
                    inner: s.shape()[axis + 1..].iter().product(),
                    channels,
                }
            }
        };
        for (i, &v) in s.data().iter().enumerate() {
            let r = &mut ranges[map.channel(i)];
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    if ranges.iter().any(|r| r.0 > r.1) {
        return Err(Error::Calibration("calibration samples are empty".into()));
    }
    Ok(ranges)
}

fn symmetrize(range: (f32, f32)) -> (f32, f32) {
    let u = range.0.abs().max(range.1.abs());
    (-u, u)
}

fn params_from_observed(
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
    observed: Vec<(f32, f32)>,
) -> Result<QuantParams> {
    let ranges: Vec<_> = observed
        .into_iter()
        .enumerate()
        .map(|(c, r)| {
            let r = if scheme == Scheme::Symmetric { symmetrize(r) } else { r };
            if r.0 < r.1 {
                Ok(r)
            } else {
                Err(Error::Calibration(format!(
                    "slice {c} is constant ({}); pass an explicit range instead",
                    r.0
                )))
            }
        })
        .collect::<Result<_>>()?;
    QuantParams::from_ranges(bits, scheme, granularity, &ranges)
}

/// Min/max calibration over all samples (globally or per channel).
/// Symmetric params use `u = max(|min|, |max|)`.
pub fn calibrate_minmax(
    samples: &[Tensor],
    bits: u8,
    scheme: Scheme,
    granularity: Granularity,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let observed = observed_ranges(samples, granularity)?;
    params_from_observed(bits, scheme, granularity, observed)
}

/// Exponential moving average of the range:
/// `l' = m·l + (1 − m)·min(batch)`, likewise for `u`.
pub fn calibrate_ema(current: &QuantParams, batch: &Tensor, momentum: f32) -> Result<QuantParams> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::arg(format!("EMA momentum {momentum} outside [0, 1)")));
    }
    let observed = observed_ranges(std::slice::from_ref(batch), current.granularity)?;
    if observed.len() != current.ranges.len() {
        return Err(Error::dim("batch channel count differs from current params"));
    }
    let m = momentum as f64;
    let blend = |old: f32, new: f32| (m * old as f64 + (1.0 - m) * new as f64) as f32;
    let next = current
        .ranges
        .iter()
        .zip(observed)
        .map(|(r, (lo, hi))| (blend(r.lower, lo), blend(r.upper, hi)))
        .collect();
    params_from_observed(current.bits, current.scheme, current.granularity, next)
}
