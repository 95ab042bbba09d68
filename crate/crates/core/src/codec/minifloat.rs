/// Bit layout of a 1-sign-bit minifloat.
#[derive(Debug)]
pub(crate) struct Minifloat {
    pub exp_bits: u32,
    pub man_bits: u32,
    bias: i32,
    /// IEEE-style top binade (Inf + NaNs). When false only the all-ones
    /// pattern is NaN and the rest of the top binade holds finite values.
    ieee_top: bool,
}

pub(crate) const E4M3: Minifloat = Minifloat {
    exp_bits: 4,
    man_bits: 3,
    bias: 7,
    ieee_top: false,
};

pub(crate) const E5M2: Minifloat = Minifloat {
    exp_bits: 5,
    man_bits: 2,
    bias: 15,
    ieee_top: true,
};

impl Minifloat {
    fn exp_mask(&self) -> u8 {
        ((1u32 << self.exp_bits) - 1) as u8
    }

    fn man_mask(&self) -> u8 {
        ((1u32 << self.man_bits) - 1) as u8
    }

    fn max_code(&self) -> u8 {
        if self.ieee_top {
            // top binade reserved: largest exponent field - 1, full mantissa
            ((self.exp_mask() - 1) << self.man_bits) | self.man_mask()
        } else {
            // all-ones is NaN: full exponent, mantissa one below all-ones
            (self.exp_mask() << self.man_bits) | (self.man_mask() - 1)
        }
    }

    pub fn max_finite(&self) -> f32 {
        self.decode(self.max_code())
    }

    pub fn min_positive(&self) -> f32 {
        self.decode(0x01)
    }

    pub fn decode(&self, byte: u8) -> f32 {
        let negative = byte & 0x80 != 0;
        let exp = (byte >> self.man_bits) & self.exp_mask();
        let man = byte & self.man_mask();
        let magnitude = if exp == self.exp_mask() && self.ieee_top {
            if man == 0 {
                f32::INFINITY
            } else {
                f32::NAN
            }
        } else if exp == self.exp_mask() && man == self.man_mask() {
            f32::NAN
        } else if exp == 0 {
            man as f32 * pow2(1 - self.bias - self.man_bits as i32)
        } else {
            let significand = (1u32 << self.man_bits) | man as u32;
            significand as f32 * pow2(exp as i32 - self.bias - self.man_bits as i32)
        };
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }

    /// Round-to-nearest-even with saturation at the largest finite value.
    /// Callers guarantee `value` is finite.
    pub fn encode(&self, value: f32) -> u8 {
        debug_assert!(value.is_finite());
        let sign = if value.is_sign_negative() { 0x80u8 } else { 0 };
        let magnitude = value.abs() as f64;
        if magnitude == 0.0 {
            return sign;
        }
        if magnitude >= self.max_finite() as f64 {
            return sign | self.max_code();
        }

        let min_exp = 1 - self.bias;
        let exp = floor_log2(magnitude).max(min_exp);
        // `magnitude / quantum` is exact: the quantum is a power of two and
        // the magnitude carries at most 24 significant bits.
        let quantum_exp = exp - self.man_bits as i32;
        let mut steps = (magnitude * 2f64.powi(-quantum_exp)).round_ties_even() as u32;
        let mut exp = exp;
        if steps == 0 {
            return sign;
        }
        let implicit = 1u32 << self.man_bits;
        if steps == implicit << 1 {
            steps = implicit;
            exp += 1;
        }
        let (exp_field, man_field) = if steps >= implicit {
            ((exp + self.bias) as u32, steps - implicit)
        } else {
            // subnormal: only reachable at the minimum exponent
            (0, steps)
        };
        let byte = ((exp_field as u8) << self.man_bits) | man_field as u8;
        sign | byte.min(self.max_code())
    }
}

fn pow2(exp: i32) -> f32 {
    2f32.powi(exp)
}

/// Exact `floor(log2(x))` for positive normal f64.
fn floor_log2(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_codes() {
        assert_eq!(E4M3.max_code(), 0x7E);
        assert_eq!(E5M2.max_code(), 0x7B);
        assert_eq!(E4M3.max_finite(), 448.0);
        assert_eq!(E5M2.max_finite(), 57344.0);
    }

    #[test]
    fn floor_log2_exact() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.75), -1);
        assert_eq!(floor_log2(448.0), 8);
        assert_eq!(floor_log2(f32::MIN_POSITIVE as f64), -126);
    }

    #[test]
    fn subnormal_boundary() {
        // largest E4M3 subnormal 7/8 * 2^-6 rounds up into the first normal
        let between = (7.5 / 8.0) * 2f32.powi(-6);
        let byte = E4M3.encode(between);
        assert_eq!(E4M3.decode(byte), 2f32.powi(-6));
    }
}
