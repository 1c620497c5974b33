//! Emulated integer and minifloat number formats and the symmetric fake quantizer.
//!
//! All quantizers here are per-tensor and symmetric. A value is clipped to
//! `[-threshold, threshold]`, mapped onto the format's native grid so that the
//! threshold lands on the largest representable magnitude, rounded to the
//! nearest grid point (ties to even), then mapped back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest integer bitwidth accepted. Int formats above 16 bits are only
/// used as high-precision references (e.g. `INT24` approximating identity).
pub const MAX_INT_BITS: u8 = 24;
pub const MIN_INT_BITS: u8 = 2;
pub const MAX_EXPONENT_BITS: u8 = 6;
pub const MAX_MANTISSA_BITS: u8 = 7;

/// Enumeration guard for [`NumericFormat::representable_values`].
pub const MAX_ENUMERABLE_BITS: u32 = 10;

const BF16_MANTISSA_BITS: i32 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("malformed format spec `{spec}`: offending token `{token}`")]
    Parse { spec: String, token: String },
    #[error("format `{spec}` out of range: {reason}")]
    Range { spec: String, reason: String },
    #[error("cannot enumerate {format}: {reason}")]
    UnsupportedEnumeration { format: String, reason: String },
    #[error("non-finite input {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("clipping threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// A number format descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NumericFormat {
    /// Symmetric signed integer with `bits` total bits (one code unused so the
    /// grid is symmetric).
    Int { bits: u8 },
    /// Sign bit plus `exponent` exponent bits plus `mantissa` mantissa bits.
    /// Subnormals supported, no infinities or NaNs, bias `2^(exponent-1)`.
    Float { exponent: u8, mantissa: u8 },
    /// bfloat16, used as the quasi-lossless reference.
    Bf16,
}

impl NumericFormat {
    pub fn int(bits: u8) -> Result<Self> {
        let f = NumericFormat::Int { bits };
        f.validate()?;
        Ok(f)
    }

    pub fn float(exponent: u8, mantissa: u8) -> Result<Self> {
        let f = NumericFormat::Float { exponent, mantissa };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NumericFormat::Int { bits } if !(MIN_INT_BITS..=MAX_INT_BITS).contains(&bits) => {
                Err(NumericsError::Range {
                    spec: self.to_string(),
                    reason: format!("integer bits must be in {MIN_INT_BITS}..={MAX_INT_BITS}"),
                })
            }
            NumericFormat::Float { exponent, .. }
                if !(1..=MAX_EXPONENT_BITS).contains(&exponent) =>
            {
                Err(NumericsError::Range {
                    spec: self.to_string(),
                    reason: format!("exponent bits must be in 1..={MAX_EXPONENT_BITS}"),
                })
            }
            NumericFormat::Float { mantissa, .. }
                if !(1..=MAX_MANTISSA_BITS).contains(&mantissa) =>
            {
                Err(NumericsError::Range {
                    spec: self.to_string(),
                    reason: format!("mantissa bits must be in 1..={MAX_MANTISSA_BITS}"),
                })
            }
            _ => Ok(()),
        }
    }

    /// Total storage bits, the `b` of the quadratic cost model.
    pub fn total_bitwidth(&self) -> u32 {
        match *self {
            NumericFormat::Int { bits } => bits as u32,
            NumericFormat::Float { exponent, mantissa } => 1 + exponent as u32 + mantissa as u32,
            NumericFormat::Bf16 => 16,
        }
    }

    /// Exponent bias of a minifloat; chosen so the normal exponent range is
    /// symmetric about zero.
    pub fn exponent_bias(&self) -> Option<i32> {
        match *self {
            NumericFormat::Float { exponent, .. } => Some(1 << (exponent - 1)),
            _ => None,
        }
    }

    /// Largest magnitude on the native grid: `2^(k-1) - 1` for integers, the
    /// max finite value for floats.
    pub fn max_representable(&self) -> f64 {
        match *self {
            NumericFormat::Int { bits } => int_levels(bits),
            NumericFormat::Float { exponent, mantissa } => {
                let bias = 1i32 << (exponent - 1);
                let emax = (1i32 << exponent) - 1 - bias;
                (2.0 - pow2(-(mantissa as i32))) * pow2(emax)
            }
            NumericFormat::Bf16 => (2.0 - pow2(-BF16_MANTISSA_BITS)) * pow2(127),
        }
    }

    /// Smallest positive normal value of a minifloat.
    fn min_normal(exponent: u8) -> f64 {
        let bias = 1i32 << (exponent - 1);
        pow2(1 - bias)
    }

    /// All distinct finite values of the native grid, sorted ascending.
    ///
    /// Integers enumerate `-(2^(k-1)-1) ..= 2^(k-1)-1`; minifloats enumerate
    /// every bit pattern (signed zeros merged). Use [`quant_grid`] for the grid
    /// seen by a quantizer at a given threshold.
    pub fn representable_values(&self) -> Result<Vec<f64>> {
        let bits = self.total_bitwidth();
        if matches!(self, NumericFormat::Bf16) || bits > MAX_ENUMERABLE_BITS {
            return Err(NumericsError::UnsupportedEnumeration {
                format: self.to_string(),
                reason: format!("only formats of at most {MAX_ENUMERABLE_BITS} bits (excluding BF16)"),
            });
        }
        match *self {
            NumericFormat::Int { bits } => {
                let q = (1i64 << (bits - 1)) - 1;
                Ok((-q..=q).map(|i| i as f64).collect())
            }
            NumericFormat::Float { exponent, mantissa } => {
                let mut values: Vec<f64> = (0u32..(1 << (exponent + mantissa)))
                    .map(|code| decode_minifloat(exponent, mantissa, code))
                    .flat_map(|v| [v, -v])
                    .map(|v| if v == 0.0 { 0.0 } else { v })
                    .collect();
                values.sort_by(|a, b| a.total_cmp(b));
                values.dedup_by(|a, b| a == b);
                Ok(values)
            }
            NumericFormat::Bf16 => unreachable!(),
        }
    }
}

/// Decode the non-negative minifloat with the given exponent/mantissa field
/// value packed as `exp_field << mantissa | man_field`.
pub(crate) fn decode_minifloat(exponent: u8, mantissa: u8, code: u32) -> f64 {
    let bias = 1i32 << (exponent - 1);
    let exp_field = (code >> mantissa) as i32;
    let man_field = (code & ((1 << mantissa) - 1)) as f64;
    let frac = man_field * pow2(-(mantissa as i32));
    if exp_field == 0 {
        frac * pow2(1 - bias)
    } else {
        (1.0 + frac) * pow2(exp_field - bias)
    }
}

/// The grid a quantizer with this threshold can output, sorted ascending.
pub fn quant_grid(format: NumericFormat, threshold: f64) -> Result<Vec<f64>> {
    let max = format.max_representable();
    Ok(format
        .representable_values()?
        .into_iter()
        .map(|v| v / max * threshold)
        .collect())
}

fn int_levels(bits: u8) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

/// Exact power of two for exponents in the normal f64 range.
fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

/// Unbiased binary exponent of a positive normal f64.
fn binary_exponent(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Round a magnitude to `mantissa` fractional bits with ties to even, never
/// letting the exponent fall below `min_exp` (subnormal region).
fn round_significand(a: f64, mantissa: i32, min_exp: i32) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let exp = if a < pow2(min_exp) {
        min_exp
    } else {
        binary_exponent(a)
    };
    let ulp = pow2(exp - mantissa);
    (a / ulp).round_ties_even() * ulp
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NumericFormat::Int { bits } => write!(f, "INT{bits}"),
            NumericFormat::Float { exponent, mantissa } => write!(f, "E{exponent}M{mantissa}"),
            NumericFormat::Bf16 => write!(f, "BF16"),
        }
    }
}

impl FromStr for NumericFormat {
    type Err = NumericsError;

    fn from_str(spec: &str) -> Result<Self> {
        parse_format(spec)
    }
}

/// Parse `INT<k>`, `E<e>M<m>` or `BF16`.
pub fn parse_format(spec: &str) -> Result<NumericFormat> {
    let parse_err = |token: &str| NumericsError::Parse {
        spec: spec.to_string(),
        token: token.to_string(),
    };
    let number = |digits: &str| -> Result<u8> {
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(parse_err(if digits.is_empty() { spec } else { digits }));
        }
        digits.parse::<u8>().map_err(|_| NumericsError::Range {
            spec: spec.to_string(),
            reason: format!("bit count `{digits}` too large"),
        })
    };

    if spec == "BF16" {
        return Ok(NumericFormat::Bf16);
    }
    if let Some(rest) = spec.strip_prefix("INT") {
        return NumericFormat::int(number(rest)?);
    }
    if let Some(rest) = spec.strip_prefix('E') {
        let (e, m) = rest.split_once('M').ok_or_else(|| parse_err(rest))?;
        return NumericFormat::float(number(e)?, number(m)?);
    }
    let token = spec
        .char_indices()
        .find(|(_, c)| c.is_ascii_digit())
        .map_or(spec, |(i, _)| &spec[..i]);
    Err(parse_err(if token.is_empty() { spec } else { token }))
}

impl Serialize for NumericFormat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NumericFormat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quantizer parameters. Rounding is always round-half-to-even.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    threshold: f64,
}

impl QuantConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold > 0.0 && threshold.is_finite() {
            Ok(Self { threshold })
        } else {
            Err(NumericsError::InvalidThreshold(threshold))
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// A precomputed fake quantizer for one (format, threshold) pair.
///
/// [`Quantizer::apply`] assumes finite input; the checked entry points are
/// [`quantize`] and friends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    format: NumericFormat,
    threshold: f64,
    grid_max: f64,
}

impl Quantizer {
    pub fn new(format: NumericFormat, config: QuantConfig) -> Self {
        Self {
            format,
            threshold: config.threshold,
            grid_max: format.max_representable(),
        }
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Whether the straight-through gradient passes at `x`.
    #[inline]
    pub fn passes_gradient(&self, x: f64) -> bool {
        matches!(self.format, NumericFormat::Bf16) || x.abs() <= self.threshold
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self.format {
            NumericFormat::Bf16 => {
                let q = round_significand(x.abs(), BF16_MANTISSA_BITS, -126);
                q.min(self.grid_max).copysign(x)
            }
            NumericFormat::Int { .. } => {
                let y = self.to_grid(x);
                self.from_grid(y.round_ties_even())
            }
            NumericFormat::Float { exponent, mantissa } => {
                let y = self.to_grid(x);
                let min_exp = binary_exponent(NumericFormat::min_normal(exponent));
                let q = round_significand(y.abs(), mantissa as i32, min_exp).min(self.grid_max);
                self.from_grid(q.copysign(y))
            }
        }
    }

    #[inline]
    fn to_grid(&self, x: f64) -> f64 {
        x.clamp(-self.threshold, self.threshold) / self.threshold * self.grid_max
    }

    #[inline]
    fn from_grid(&self, v: f64) -> f64 {
        v / self.grid_max * self.threshold
    }

    pub fn apply_slice(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite {
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// Fake-quantize a tensor (quantize then dequantize).
pub fn quantize(xs: &[f64], format: NumericFormat, config: QuantConfig) -> Result<Vec<f64>> {
    check_finite(xs)?;
    Ok(Quantizer::new(format, config).apply_slice(xs))
}

pub fn quantize_scalar(x: f64, format: NumericFormat, config: QuantConfig) -> Result<f64> {
    check_finite(&[x])?;
    Ok(Quantizer::new(format, config).apply(x))
}

/// Absolute quantization error `|Q(x) - x|`.
pub fn quant_error(x: f64, format: NumericFormat, config: QuantConfig) -> Result<f64> {
    Ok((quantize_scalar(x, format, config)? - x).abs())
}

/// Absolute difference between `x` quantized under two formats sharing one threshold.
pub fn switching_error(
    x: f64,
    first: NumericFormat,
    second: NumericFormat,
    config: QuantConfig,
) -> Result<f64> {
    Ok((quantize_scalar(x, second, config)? - quantize_scalar(x, first, config)?).abs())
}

/// Root-mean-square switching error over a tensor.
pub fn rms_switching_error(
    xs: &[f64],
    first: NumericFormat,
    second: NumericFormat,
    config: QuantConfig,
) -> Result<f64> {
    check_finite(xs)?;
    if xs.is_empty() {
        return Ok(0.0);
    }
    let q1 = Quantizer::new(first, config);
    let q2 = Quantizer::new(second, config);
    let sum: f64 = xs
        .iter()
        .map(|&x| {
            let d = q2.apply(x) - q1.apply(x);
            d * d
        })
        .sum();
    Ok((sum / xs.len() as f64).sqrt())
}
