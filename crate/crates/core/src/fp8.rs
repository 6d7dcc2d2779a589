//! Software emulation of the 8-bit float formats E4M3 and E5M2.
//!
//! Encoding rounds to nearest, ties to even, over the full representable set
//! including subnormals. Finite magnitudes above the format maximum saturate.
//! E4M3 has no infinities: `S.1111.111` is NaN. E5M2 follows IEEE semantics:
//! an all-ones exponent is infinity (zero mantissa) or NaN.
//!
//! Scale convention: a block is encoded as `x / s` and decoded as `code · s`,
//! with `s = max|x| / max_value` so the block maximum lands on the format
//! maximum.

use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fp8Kind {
    E4M3,
    E5M2,
}

impl Fp8Kind {
    pub fn format(self) -> Fp8Format {
        match self {
            Fp8Kind::E4M3 => Fp8Format::E4M3,
            Fp8Kind::E5M2 => Fp8Format::E5M2,
        }
    }
}

impl std::str::FromStr for Fp8Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e4m3" => Ok(Fp8Kind::E4M3),
            "e5m2" => Ok(Fp8Kind::E5M2),
            other => Err(Error::Config(format!(
                "unknown fp8 format {other:?} (expected e4m3 or e5m2)"
            ))),
        }
    }
}

impl fmt::Display for Fp8Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fp8Kind::E4M3 => "e4m3",
            Fp8Kind::E5M2 => "e5m2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fp8Format {
    pub kind: Fp8Kind,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub exponent_bias: i32,
    /// Largest finite magnitude.
    pub max_value: f32,
    /// Smallest normal magnitude, `2^(1 - bias)`.
    pub min_normal: f32,
    pub has_inf: bool,
}

impl Fp8Format {
    pub const E4M3: Fp8Format = Fp8Format {
        kind: Fp8Kind::E4M3,
        exponent_bits: 4,
        mantissa_bits: 3,
        exponent_bias: 7,
        max_value: 448.0,
        min_normal: 0.015625,
        has_inf: false,
    };

    pub const E5M2: Fp8Format = Fp8Format {
        kind: Fp8Kind::E5M2,
        exponent_bits: 5,
        mantissa_bits: 2,
        exponent_bias: 15,
        max_value: 57344.0,
        min_normal: 6.103_515_6e-5,
        has_inf: true,
    };

    pub fn name(&self) -> &'static str {
        match self.kind {
            Fp8Kind::E4M3 => "E4M3",
            Fp8Kind::E5M2 => "E5M2",
        }
    }

    /// Smallest positive subnormal, `2^(1 - bias - mantissa_bits)`.
    pub fn min_subnormal(&self) -> f32 {
        pow2(1 - self.exponent_bias - self.mantissa_bits as i32)
    }

    /// Magnitude bits of the largest finite code.
    pub fn max_code(&self) -> u8 {
        match self.kind {
            Fp8Kind::E4M3 => 0x7e,
            Fp8Kind::E5M2 => 0x7b,
        }
    }

    fn inf_code(&self) -> u8 {
        match self.kind {
            Fp8Kind::E4M3 => self.max_code(),
            Fp8Kind::E5M2 => 0x7c,
        }
    }

    pub fn is_nan_code(&self, code: Fp8Code) -> bool {
        let mag = code.0 & 0x7f;
        match self.kind {
            Fp8Kind::E4M3 => mag == 0x7f,
            Fp8Kind::E5M2 => mag > 0x7c,
        }
    }

    /// All 256 decoded values; NaN patterns decode to `f32::NAN`.
    pub fn decode_table(&self) -> &'static [f32; 256] {
        match self.kind {
            Fp8Kind::E4M3 => &E4M3_TABLE,
            Fp8Kind::E5M2 => &E5M2_TABLE,
        }
    }

    /// Worst-case absolute rounding error of a scaled value in range, which is
    /// half the spacing of the top binade.
    pub fn half_top_quantum(&self) -> f32 {
        let top = self.max_value.log2().floor() as i32;
        pow2(top - self.mantissa_bits as i32 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub fn bits(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScaleFactor(f32);

impl ScaleFactor {
    /// Used for all-zero blocks.
    pub const ONE: ScaleFactor = ScaleFactor(1.0);

    pub fn new(value: f32) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::InvalidScale(value))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

static E4M3_TABLE: LazyLock<[f32; 256]> = LazyLock::new(|| build_table(&Fp8Format::E4M3));
static E5M2_TABLE: LazyLock<[f32; 256]> = LazyLock::new(|| build_table(&Fp8Format::E5M2));

fn build_table(format: &Fp8Format) -> [f32; 256] {
    let mut table = [0.0; 256];
    for (code, slot) in table.iter_mut().enumerate() {
        *slot = decode_bits(code as u8, format);
    }
    table
}

fn pow2(e: i32) -> f32 {
    debug_assert!((-126..=127).contains(&e));
    f32::from_bits(((e + 127) as u32) << 23)
}

fn decode_bits(code: u8, format: &Fp8Format) -> f32 {
    let m = format.mantissa_bits;
    let mag = code & 0x7f;
    let exp_field = (mag >> m) as i32;
    let mantissa = (mag & ((1 << m) - 1)) as f32;
    let value = if format.is_nan_code(Fp8Code(code)) {
        f32::NAN
    } else if format.has_inf && mag == format.inf_code() {
        f32::INFINITY
    } else if exp_field == 0 {
        mantissa * format.min_subnormal()
    } else {
        ((1 << m) as f32 + mantissa) * pow2(exp_field - format.exponent_bias - m as i32)
    };
    if code & 0x80 != 0 {
        -value
    } else {
        value
    }
}

/// Encodes a non-NaN value. Caller guarantees `!x.is_nan()`.
#[inline]
pub(crate) fn encode_unchecked(x: f32, format: &Fp8Format) -> u8 {
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    let m = format.mantissa_bits;
    let mag = if a >= format.max_value {
        if a.is_infinite() {
            format.inf_code()
        } else {
            format.max_code()
        }
    } else if a < format.min_normal {
        // Scaling by a power of two is exact, so this rounds `a` to the
        // subnormal grid. A result of 2^m is the smallest normal code.
        let steps = (a / format.min_subnormal()).round_ties_even();
        steps as u8
    } else {
        let e = ((a.to_bits() >> 23) & 0xff) as i32 - 127;
        let steps = (a * pow2(m as i32 - e)).round_ties_even() as u32;
        // steps lies in [2^m, 2^(m+1)]; the upper end carries into the exponent.
        ((((e + format.exponent_bias) as u32) << m) + steps - (1 << m)) as u8
    };
    sign | mag
}

/// `E4M3.decode_table()[encode(y)]` for finite `y >= 0`, without branches
/// or table lookups.
#[inline(always)]
pub(crate) fn round_e4m3_nonneg(y: f32) -> f32 {
    // Normal range: keep three mantissa bits, ties to even.
    let b = y.to_bits();
    let normal = f32::from_bits((b + 0x7_ffff + ((b >> 20) & 1)) & !0xf_ffff);
    // Subnormal range: 2^14 has an ulp of 2^-9, the subnormal quantum, so
    // the addition rounds to that grid with ties to even.
    let subnormal = (y + 16384.0) - 16384.0;
    let r = if y < Fp8Format::E4M3.min_normal { subnormal } else { normal };
    r.min(Fp8Format::E4M3.max_value)
}

/// Rounds `x` to the nearest representable value (ties to even) and returns
/// its code. Finite overflow saturates to ±max; infinities saturate for E4M3
/// and map to the infinity code for E5M2.
pub fn encode(x: f32, format: &Fp8Format) -> Result<Fp8Code> {
    if x.is_nan() {
        return Err(Error::NanInput);
    }
    Ok(Fp8Code(encode_unchecked(x, format)))
}

pub fn decode(code: Fp8Code, format: &Fp8Format) -> Result<f32> {
    if format.is_nan_code(code) {
        return Err(Error::NanCode {
            code: code.0,
            format: format.name(),
        });
    }
    Ok(format.decode_table()[code.0 as usize])
}

/// `max|x| / max_value`, or [`ScaleFactor::ONE`] for an all-zero block.
pub fn compute_scale(values: &[f32], format: &Fp8Format) -> Result<ScaleFactor> {
    if values.is_empty() {
        return Err(Error::Empty("scale block"));
    }
    let mut amax = 0.0f32;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                value: v,
                context: "scale block",
            });
        }
        amax = amax.max(v.abs());
    }
    Ok(scale_from_amax(amax, format))
}

pub(crate) fn scale_from_amax(amax: f32, format: &Fp8Format) -> ScaleFactor {
    if amax == 0.0 {
        ScaleFactor::ONE
    } else {
        ScaleFactor(amax / format.max_value)
    }
}

/// `decode(encode(x / s)) · s`.
pub fn quantize_dequantize(x: f32, scale: ScaleFactor, format: &Fp8Format) -> Result<f32> {
    if !x.is_finite() {
        return Err(if x.is_nan() {
            Error::NanInput
        } else {
            Error::NonFinite {
                value: x,
                context: "quantize_dequantize",
            }
        });
    }
    let code = encode_unchecked(x / scale.0, format);
    Ok(format.decode_table()[code as usize] * scale.0)
}
