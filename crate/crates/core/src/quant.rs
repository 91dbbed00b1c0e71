//! Uniform affine quantizer: parameter construction, quantize, dequantize
//! and fake quantization.
//!
//! Codes follow the usual two sets: signed `[-2^(b-1), 2^(b-1) - 1]` and
//! unsigned `[0, 2^b - 1]`. Rounding is round-half-to-even everywhere.
//! `bits == 32` is the "not quantized" sentinel; fake quantization with it
//! is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::tensor::{IntTensor, Tensor};

/// Bit-width sentinel for tensors kept in full precision.
pub const FULL_PRECISION_BITS: u32 = 32;

pub fn is_valid_bits(bits: u32) -> bool {
    (2..=8).contains(&bits) || bits == FULL_PRECISION_BITS
}

/// Inclusive code range for a bit-width and code set.
pub fn code_range(bits: u32, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub lower: f32,
    pub upper: f32,
}

impl ClipRange {
    pub fn new(lower: f32, upper: f32) -> Result<Self> {
        let r = Self { lower, upper };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lower.is_finite() || !self.upper.is_finite() || self.upper <= self.lower {
            return Err(QuantError::NonPositiveRange { lower: self.lower, upper: self.upper });
        }
        Ok(())
    }

    /// Widens to `(-a, a)` with `a = max(|lower|, |upper|)`.
    pub fn symmetrized(&self) -> ClipRange {
        let a = self.lower.abs().max(self.upper.abs());
        ClipRange { lower: -a, upper: a }
    }

    pub fn contains_range(&self, other: &ClipRange) -> bool {
        self.lower <= other.lower && other.upper <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Scale/zero-point pairs plus the code set they address.
///
/// Per-tensor parameters hold exactly one pair; per-channel parameters hold
/// one pair per slice along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantParams")]
pub struct QuantParams {
    bits: u32,
    signed: bool,
    symmetric: bool,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
    granularity: Granularity,
}

#[derive(Deserialize)]
struct RawQuantParams {
    bits: u32,
    signed: bool,
    symmetric: bool,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
    granularity: Granularity,
}

impl TryFrom<RawQuantParams> for QuantParams {
    type Error = QuantError;

    fn try_from(r: RawQuantParams) -> Result<Self> {
        QuantParams::from_parts(r.bits, r.signed, r.symmetric, r.scales, r.zero_points, r.granularity)
    }
}

impl QuantParams {
    pub fn from_parts(
        bits: u32,
        signed: bool,
        symmetric: bool,
        scales: Vec<f64>,
        zero_points: Vec<i32>,
        granularity: Granularity,
    ) -> Result<Self> {
        let qp = Self { bits, signed, symmetric, scales, zero_points, granularity };
        qp.validate()?;
        Ok(qp)
    }

    /// The full-precision sentinel.
    pub fn identity() -> Self {
        Self {
            bits: FULL_PRECISION_BITS,
            signed: false,
            symmetric: false,
            scales: vec![1.0],
            zero_points: vec![0],
            granularity: Granularity::PerTensor,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QuantError::InvalidParams(m));
        if !is_valid_bits(self.bits) {
            return Err(QuantError::InvalidBits(self.bits));
        }
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return bad(format!(
                "{} scales vs {} zero-points",
                self.scales.len(),
                self.zero_points.len()
            ));
        }
        if self.granularity == Granularity::PerTensor && self.scales.len() != 1 {
            return bad("per-tensor parameters must hold one channel".into());
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("scale {s} is not positive"));
        }
        if self.is_full_precision() {
            return Ok(());
        }
        let (lo, hi) = code_range(self.bits, self.signed);
        for &zp in &self.zero_points {
            if zp < lo || zp > hi {
                return bad(format!("zero-point {zp} outside [{lo}, {hi}]"));
            }
            if self.symmetric && self.signed && zp != 0 {
                return bad("symmetric signed parameters need zero-point 0".into());
            }
        }
        Ok(())
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn is_full_precision(&self) -> bool {
        self.bits == FULL_PRECISION_BITS
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bits, self.signed)
    }

    /// Real interval representable by channel `c`, i.e.
    /// `((code_min - zp) * s, (code_max - zp) * s)`.
    pub fn representable(&self, c: usize) -> (f64, f64) {
        let (lo, hi) = self.code_range();
        let s = self.scales[c];
        let zp = self.zero_points[c] as f64;
        ((lo as f64 - zp) * s, (hi as f64 - zp) * s)
    }

    /// Builds per-channel parameters, one range per slice along `axis`.
    pub fn per_channel(
        ranges: &[ClipRange],
        bits: u32,
        signed: bool,
        symmetric: bool,
        axis: usize,
    ) -> Result<Self> {
        check_quant_bits(bits)?;
        if ranges.is_empty() {
            return Err(QuantError::InvalidParams("no channel ranges".into()));
        }
        let mut scales = Vec::with_capacity(ranges.len());
        let mut zero_points = Vec::with_capacity(ranges.len());
        for r in ranges {
            let (s, zp) = channel_params(r, bits, signed, symmetric)?;
            scales.push(s);
            zero_points.push(zp);
        }
        Self::from_parts(bits, signed, symmetric, scales, zero_points, Granularity::PerChannel { axis })
    }
}

fn check_quant_bits(bits: u32) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

fn channel_params(range: &ClipRange, bits: u32, signed: bool, symmetric: bool) -> Result<(f64, i32)> {
    range.validate()?;
    let (code_min, code_max) = code_range(bits, signed);
    let levels = ((1u32 << bits) - 1) as f64;
    let degenerate = || QuantError::DegenerateRange { lower: range.lower, upper: range.upper };

    if range.upper - range.lower == 0.0 {
        return Err(degenerate());
    }
    if symmetric {
        let a = range.symmetrized().upper as f64;
        let s = 2.0 * a / levels;
        if !(s > 0.0 && s.is_finite()) {
            return Err(degenerate());
        }
        let zp = if signed { 0 } else { 1 << (bits - 1) };
        Ok((s, zp))
    } else {
        let width = range.upper as f64 - range.lower as f64;
        let s = width / levels;
        if !(s > 0.0 && s.is_finite()) {
            return Err(degenerate());
        }
        // `lower` lands on `code_min`; for the unsigned set this is the
        // familiar clip(round(-l / s), 0, 2^b - 1).
        let offset = (-(range.lower as f64) / s).round_ties_even();
        let zp = (code_min as f64 + offset).clamp(code_min as f64, code_max as f64) as i32;
        Ok((s, zp))
    }
}

/// Per-tensor parameters for `range`.
pub fn make_qparams(range: ClipRange, bits: u32, signed: bool, symmetric: bool) -> Result<QuantParams> {
    check_quant_bits(bits)?;
    let (s, zp) = channel_params(&range, bits, signed, symmetric)?;
    QuantParams::from_parts(bits, signed, symmetric, vec![s], vec![zp], Granularity::PerTensor)
}

/// Resolves, for every flat index, which channel's parameters apply.
struct ChannelMap {
    inner: usize,
    channels: usize,
}

impl ChannelMap {
    fn new(shape: &[usize], qp: &QuantParams) -> Result<Self> {
        match qp.granularity {
            Granularity::PerTensor => Ok(Self { inner: 1, channels: 1 }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(QuantError::ShapeMismatch(format!(
                        "channel axis {axis} exceeds rank {}",
                        shape.len()
                    )));
                }
                if shape[axis] != qp.scales.len() {
                    return Err(QuantError::ShapeMismatch(format!(
                        "axis {axis} has {} slices but parameters hold {} channels",
                        shape[axis],
                        qp.scales.len()
                    )));
                }
                Ok(Self { inner: shape[axis + 1..].iter().product(), channels: shape[axis] })
            }
        }
    }

    #[inline]
    fn channel(&self, flat: usize) -> usize {
        if self.channels == 1 {
            0
        } else {
            (flat / self.inner) % self.channels
        }
    }
}

#[inline]
fn quantize_scalar(x: f32, s: f64, zp: i32, code_min: i32, code_max: i32) -> i32 {
    let code = (x as f64 / s).round_ties_even() + zp as f64;
    code.clamp(code_min as f64, code_max as f64) as i32
}

#[inline]
fn dequantize_scalar(q: i32, s: f64, zp: i32) -> f32 {
    ((q - zp) as f64 * s) as f32
}

pub fn quantize(x: &Tensor, qp: &QuantParams) -> Result<IntTensor> {
    if qp.is_full_precision() {
        return Err(QuantError::InvalidParams("cannot produce codes for the 32-bit sentinel".into()));
    }
    let map = ChannelMap::new(x.shape(), qp)?;
    let (lo, hi) = qp.code_range();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = map.channel(i);
            quantize_scalar(v, qp.scales[c], qp.zero_points[c], lo, hi)
        })
        .collect();
    Ok(IntTensor::from_parts(x.shape().to_vec(), codes))
}

pub fn dequantize(q: &IntTensor, qp: &QuantParams) -> Result<Tensor> {
    let map = ChannelMap::new(q.shape(), qp)?;
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = map.channel(i);
            dequantize_scalar(code, qp.scales[c], qp.zero_points[c])
        })
        .collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}

/// `dequantize(quantize(x))`, fused. The sentinel returns `x` unchanged.
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    if qp.is_full_precision() {
        return Ok(x.clone());
    }
    let map = ChannelMap::new(x.shape(), qp)?;
    let (lo, hi) = qp.code_range();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = map.channel(i);
            let (s, zp) = (qp.scales[c], qp.zero_points[c]);
            dequantize_scalar(quantize_scalar(v, s, zp, lo, hi), s, zp)
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Fake-quantizes a flat slice with per-tensor parameters.
pub fn fake_quantize_slice(values: &[f32], qp: &QuantParams) -> Vec<f32> {
    if qp.is_full_precision() {
        return values.to_vec();
    }
    let (lo, hi) = qp.code_range();
    let (s, zp) = (qp.scales[0], qp.zero_points[0]);
    values
        .iter()
        .map(|&v| dequantize_scalar(quantize_scalar(v, s, zp, lo, hi), s, zp))
        .collect()
}

/// Mean squared error between two equally long slices, accumulated in f64.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse over slices of different length");
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}
