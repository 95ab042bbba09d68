/// Round to the nearest BF16 value (ties to even) and widen back to f32.
pub fn round_bf16(value: f32) -> f32 {
    if value.is_nan() {
        return value;
    }
    let bits = value.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits(bits.wrapping_add(0x7fff + lsb) & 0xffff_0000)
}

pub fn round_bf16_slice(values: &mut [f32]) {
    for v in values {
        *v = round_bf16(*v);
    }
}
