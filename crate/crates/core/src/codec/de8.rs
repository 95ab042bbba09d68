//! Signed 8-bit dynamic-exponent (DE8) codec.
//!
//! Byte layout, most significant bit first:
//!
//! ```text
//!   s | 0 ... 0 | 1 | f ... f
//!       z zeros  ind  6 - z fraction bits
//! ```
//!
//! `z` leading zeros select the decade `10^-z` (z in 0..=6), the indicator bit
//! terminates the run, and the remaining `6 - z` bits index one of `2^(6-z)`
//! evenly spaced midpoints of `[0.1, 1]`. The two patterns without an indicator
//! bit hold the endpoints: `0x00` is zero and `0x80` is `+1.0`. The resulting
//! 256 values are the signed dynamic map of 8-bit optimizers.

use std::sync::OnceLock;

use super::{CodecError, Fp8Code, Fp8Format};

const MAX_DECADES: u32 = 7;

/// Value for the 7 non-sign bits of a code with the sign bit clear.
fn magnitude(low: u8) -> f64 {
    debug_assert!(low != 0 && low < 0x80);
    let zeros = low.leading_zeros() - 1;
    let frac_bits = MAX_DECADES - 1 - zeros;
    let index = (low as u32) & ((1 << frac_bits) - 1);
    let slots = (1u32 << frac_bits) as f64;
    let midpoint = 0.1 + (index as f64 + 0.5) * 0.9 / slots;
    10f64.powi(-(zeros as i32)) * midpoint
}

pub fn decode_de8(byte: u8) -> f32 {
    let low = byte & 0x7f;
    match (byte >> 7, low) {
        (0, 0) => 0.0,
        (_, 0) => 1.0,
        (0, _) => magnitude(low) as f32,
        _ => -(magnitude(low) as f32),
    }
}

/// Every DE8 value sorted ascending, paired with its byte.
fn sorted_table() -> &'static [(f32, u8); 256] {
    static TABLE: OnceLock<[(f32, u8); 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [(0.0f32, 0u8); 256];
        for (slot, byte) in table.iter_mut().zip(0..=255u8) {
            *slot = (decode_de8(byte), byte);
        }
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        table
    })
}

pub(crate) fn min_positive() -> f32 {
    decode_de8(0x01)
}

/// Nearest-value encode for `|value| <= 1`. Ties resolve toward the smaller
/// magnitude.
pub(crate) fn encode_byte(value: f32) -> u8 {
    let table = sorted_table();
    let upper = table.partition_point(|&(v, _)| v < value);
    if upper == 0 {
        return table[0].1;
    }
    if upper == table.len() {
        return table[table.len() - 1].1;
    }
    let (lo, lo_byte) = table[upper - 1];
    let (hi, hi_byte) = table[upper];
    if hi == value {
        return hi_byte;
    }
    let d_lo = (value as f64 - lo as f64).abs();
    let d_hi = (hi as f64 - value as f64).abs();
    if d_lo < d_hi || (d_lo == d_hi && lo.abs() <= hi.abs()) {
        lo_byte
    } else {
        hi_byte
    }
}

pub fn encode_de8(value: f32) -> Result<Fp8Code, CodecError> {
    if !value.is_finite() {
        return Err(CodecError::NonFiniteInput(value));
    }
    if value.abs() > 1.0 {
        return Err(CodecError::OutOfRange(value));
    }
    Ok(Fp8Code {
        byte: encode_byte(value),
        format: Fp8Format::DE8,
    })
}
