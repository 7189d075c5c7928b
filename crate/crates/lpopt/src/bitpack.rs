//! Fixed-width bit packing for quantization codes.
//!
//! Codes of 1-8 bits are laid out least-significant-bit first: earlier
//! elements occupy lower bit positions within each byte, and the final byte
//! is zero-padded in its unused high bits so identical inputs always produce
//! identical bytes.

use crate::error::{Error, Result};

/// Unsigned integer codes together with their bit width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeArray {
    codes: Vec<u8>,
    bitwidth: u8,
}

impl CodeArray {
    /// Build a code array, checking every code fits in `bitwidth` bits.
    pub fn new(codes: Vec<u8>, bitwidth: u8) -> Result<Self> {
        if !(1..=8).contains(&bitwidth) {
            return Err(Error::Range(format!("bitwidth {bitwidth} not in 1..=8")));
        }
        let limit = max_code(bitwidth);
        if let Some(bad) = codes.iter().position(|&c| c > limit) {
            return Err(Error::Range(format!(
                "code {} at position {bad} exceeds {limit} for bitwidth {bitwidth}",
                codes[bad]
            )));
        }
        Ok(CodeArray { codes, bitwidth })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Largest code representable at `bitwidth` bits.
pub fn max_code(bitwidth: u8) -> u8 {
    ((1u16 << bitwidth) - 1) as u8
}

/// Bytes needed to store `count` codes of `bitwidth` bits.
pub fn packed_len(count: usize, bitwidth: u8) -> usize {
    (count * bitwidth as usize).div_ceil(8)
}

/// Pack codes into a byte stream.
pub fn pack(codes: &CodeArray) -> Vec<u8> {
    let bits = codes.bitwidth as u32;
    let mut out = Vec::with_capacity(packed_len(codes.len(), codes.bitwidth));
    let mut acc: u64 = 0;
    let mut acc_bits: u32 = 0;
    for &code in &codes.codes {
        acc |= u64::from(code) << acc_bits;
        acc_bits += bits;
        while acc_bits >= 8 {
            out.push((acc & 0xFF) as u8);
            acc >>= 8;
            acc_bits -= 8;
        }
    }
    if acc_bits > 0 {
        out.push((acc & 0xFF) as u8);
    }
    out
}

/// Unpack `count` codes of `bitwidth` bits; the inverse of [`pack`].
pub fn unpack(bytes: &[u8], bitwidth: u8, count: usize) -> Result<CodeArray> {
    if !(1..=8).contains(&bitwidth) {
        return Err(Error::Range(format!("bitwidth {bitwidth} not in 1..=8")));
    }
    let expected = packed_len(count, bitwidth);
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!(
                "packed payload is {} bytes, {count} codes at {bitwidth} bits need {expected}",
                bytes.len()
            ),
        ));
    }
    let bits = bitwidth as u32;
    let mask = (1u64 << bits) - 1;
    let mut codes = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut acc_bits: u32 = 0;
    let mut byte_idx = 0usize;
    for _ in 0..count {
        while acc_bits < bits {
            acc |= u64::from(bytes[byte_idx]) << acc_bits;
            acc_bits += 8;
            byte_idx += 1;
        }
        codes.push((acc & mask) as u8);
        acc >>= bits;
        acc_bits -= bits;
    }
    Ok(CodeArray { codes, bitwidth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_nibbles() {
        let c = CodeArray::new(vec![0x1, 0xF, 0x3], 4).unwrap();
        assert_eq!(pack(&c), vec![0xF1, 0x03]);
    }

    #[test]
    fn pack_bytes_is_identity() {
        let c = CodeArray::new(vec![7, 255], 8).unwrap();
        assert_eq!(pack(&c), vec![0x07, 0xFF]);
    }

    #[test]
    fn pack_empty() {
        let c = CodeArray::new(vec![], 4).unwrap();
        assert_eq!(pack(&c), Vec::<u8>::new());
    }

    #[test]
    fn unpack_nibbles() {
        let c = unpack(&[0xF1, 0x03], 4, 3).unwrap();
        assert_eq!(c.codes(), &[0x1, 0xF, 0x3]);
        let c = unpack(&[0xAB], 4, 2).unwrap();
        assert_eq!(c.codes(), &[0xB, 0xA]);
    }

    #[test]
    fn code_out_of_range_rejected() {
        assert!(CodeArray::new(vec![4], 2).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            unpack(&[0xF1], 4, 3),
            Err(crate::error::Error::Format { .. })
        ));
    }

    #[test]
    fn padding_bits_are_zero() {
        let c = CodeArray::new(vec![1, 1, 1], 3).unwrap();
        let bytes = pack(&c);
        assert_eq!(bytes.len(), 2);
        // 9 bits used, top 7 bits of the last byte must be zero
        assert_eq!(bytes[1] & 0xFE, 0);
    }

    proptest! {
        #[test]
        fn roundtrip_any_bitwidth(bitwidth in 1u8..=8, len in 0usize..4096, seed in any::<u64>()) {
            let limit = max_code(bitwidth);
            let mut state = seed;
            let codes: Vec<u8> = (0..len).map(|_| {
                state = crate::rng::splitmix64(state);
                (state & u64::from(limit)) as u8
            }).collect();
            let arr = CodeArray::new(codes, bitwidth).unwrap();
            let bytes = pack(&arr);
            prop_assert_eq!(bytes.len(), packed_len(len, bitwidth));
            let back = unpack(&bytes, bitwidth, len).unwrap();
            prop_assert_eq!(back, arr);
        }
    }
}
