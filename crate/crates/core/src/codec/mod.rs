//! Scalar 8-bit codecs.
//!
//! Three byte formats are supported:
//!
//! * `E4M3` (OCP "FN" flavour): bias 7, no infinities, `S.1111.111` is NaN.
//! * `E5M2`: bias 15, IEEE-like with infinities and NaNs in the top binade.
//! * `DE8`: the signed dynamic-exponent map used by 8-bit optimizers. It is a
//!   normalized format covering `[-1, 1]`; see [`de8`] for the bit layout.
//!
//! BF16 is emulated in 32-bit storage by [`round_bf16`].

mod bf16;
pub mod de8;
mod minifloat;

pub use bf16::{round_bf16, round_bf16_slice};
pub use de8::{decode_de8, encode_de8};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use minifloat::Minifloat;

/// E4M3 largest finite magnitude over smallest positive magnitude (448 * 512).
pub const E4M3_DYNAMIC_RANGE: f64 = 229_376.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite input {0} cannot be encoded")]
    NonFiniteInput(f32),
    #[error("value {0} lies outside the normalized DE8 domain [-1, 1]")]
    OutOfRange(f32),
}

/// An 8-bit storage format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fp8Format {
    E4M3,
    E5M2,
    DE8,
}

impl Fp8Format {
    pub const ALL: [Fp8Format; 3] = [Fp8Format::E4M3, Fp8Format::E5M2, Fp8Format::DE8];

    fn minifloat(self) -> Option<&'static Minifloat> {
        match self {
            Fp8Format::E4M3 => Some(&minifloat::E4M3),
            Fp8Format::E5M2 => Some(&minifloat::E5M2),
            Fp8Format::DE8 => None,
        }
    }

    /// Largest finite magnitude.
    pub fn delta_max(self) -> f32 {
        match self.minifloat() {
            Some(mf) => mf.max_finite(),
            None => 1.0,
        }
    }

    /// Smallest positive magnitude, subnormals included.
    pub fn delta_min(self) -> f32 {
        match self.minifloat() {
            Some(mf) => mf.min_positive(),
            None => de8::min_positive(),
        }
    }

    /// Exponent field width. DE8 reports its maximum exponent width (7).
    pub fn exponent_bits(self) -> u32 {
        match self.minifloat() {
            Some(mf) => mf.exp_bits,
            None => 7,
        }
    }

    /// Mantissa field width. DE8 reports its maximum fraction width (6).
    pub fn mantissa_bits(self) -> u32 {
        match self.minifloat() {
            Some(mf) => mf.man_bits,
            None => 6,
        }
    }

    pub fn dynamic_range(self) -> f64 {
        self.delta_max() as f64 / self.delta_min() as f64
    }

    /// Single-byte tag used by the on-disk record formats.
    pub fn tag(self) -> u8 {
        match self {
            Fp8Format::E4M3 => 0,
            Fp8Format::E5M2 => 1,
            Fp8Format::DE8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Fp8Format::E4M3),
            1 => Some(Fp8Format::E5M2),
            2 => Some(Fp8Format::DE8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fp8Format::E4M3 => "E4M3",
            Fp8Format::E5M2 => "E5M2",
            Fp8Format::DE8 => "DE8",
        }
    }

    /// Encode a value already mapped into this format's range.
    ///
    /// E4M3/E5M2 saturate magnitudes above `delta_max`; DE8 rejects `|v| > 1`.
    pub fn encode(self, value: f32) -> Result<Fp8Code, CodecError> {
        encode(value, self)
    }

    pub fn decode(self, byte: u8) -> f32 {
        match self.minifloat() {
            Some(mf) => mf.decode(byte),
            None => decode_de8(byte),
        }
    }

    /// Clamp-to-range encode used by the tensor quantizers, where scaling has
    /// already been applied and only rounding noise can leave the domain.
    pub(crate) fn encode_saturating(self, value: f32) -> u8 {
        match self.minifloat() {
            Some(mf) => mf.encode(value),
            None => de8::encode_byte(value.clamp(-1.0, 1.0)),
        }
    }

    /// `true` when `byte` decodes to a finite number.
    pub fn is_finite_code(self, byte: u8) -> bool {
        self.decode(byte).is_finite()
    }

    /// Iterator over every byte pattern of the format.
    pub fn codes(self) -> impl Iterator<Item = Fp8Code> {
        (0..=u8::MAX).map(move |byte| Fp8Code { byte, format: self })
    }
}

impl std::fmt::Display for Fp8Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Fp8Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "E4M3" => Ok(Fp8Format::E4M3),
            "E5M2" => Ok(Fp8Format::E5M2),
            "DE8" => Ok(Fp8Format::DE8),
            other => Err(format!("unknown 8-bit format '{other}'")),
        }
    }
}

/// One encoded byte together with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8Code {
    pub byte: u8,
    pub format: Fp8Format,
}

impl Fp8Code {
    pub fn decode(self) -> f32 {
        decode(self)
    }
}

/// Round-to-nearest-even encode of a finite value.
pub fn encode(value: f32, format: Fp8Format) -> Result<Fp8Code, CodecError> {
    if !value.is_finite() {
        return Err(CodecError::NonFiniteInput(value));
    }
    let byte = match format.minifloat() {
        Some(mf) => mf.encode(value),
        None => return encode_de8(value),
    };
    Ok(Fp8Code { byte, format })
}

pub fn decode(code: Fp8Code) -> f32 {
    code.format.decode(code.byte)
}
