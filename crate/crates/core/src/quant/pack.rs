//! Bit-packing of quantization codes.
//!
//! Codes are packed little-endian within the bit stream: code `i` occupies
//! stream bits `[i*bits, (i+1)*bits)`, and stream bit `k` is bit `k % 8` of
//! byte `k / 8`. Unused trailing bits of the final byte are zero, and
//! unpacking rejects buffers where they are not.

use crate::error::{Error, Result};

/// Bytes needed to pack `count` codes of `bits` bits each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize + 7) / 8
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        3 | 4 | 8 => Ok(()),
        _ => Err(Error::invalid(format!(
            "unsupported code width: {bits} bits (expected 3, 4, or 8)"
        ))),
    }
}

/// Packs `codes` into a byte buffer. Every code must fit in `bits` bits.
pub fn pack_codes(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let max_code = (1u32 << bits) - 1;
    if let Some(index) = codes.iter().position(|&c| c > max_code) {
        return Err(Error::invalid(format!(
            "code {} at index {index} exceeds {bits}-bit range",
            codes[index]
        )));
    }

    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut acc: u32 = 0;
    let mut acc_bits: u32 = 0;
    let mut pos = 0;
    for &code in codes {
        acc |= code << acc_bits;
        acc_bits += bits as u32;
        while acc_bits >= 8 {
            out[pos] = (acc & 0xFF) as u8;
            acc >>= 8;
            acc_bits -= 8;
            pos += 1;
        }
    }
    if acc_bits > 0 {
        out[pos] = (acc & 0xFF) as u8; // high bits of the last byte stay zero
    }
    Ok(out)
}

/// Unpacks `count` codes of `bits` bits from `bytes`.
///
/// The buffer length must be exactly `packed_len(count, bits)` and any pad
/// bits beyond the last code must be zero; both are treated as corruption
/// otherwise.
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    check_bits(bits)?;
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "packed buffer is {} bytes, expected {expected} for {count} codes at {bits} bits",
            bytes.len()
        )));
    }

    let mask = (1u32 << bits) - 1;
    let mut codes = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut acc_bits: u32 = 0;
    let mut pos = 0;
    for _ in 0..count {
        while acc_bits < bits as u32 {
            acc |= (bytes[pos] as u32) << acc_bits;
            acc_bits += 8;
            pos += 1;
        }
        codes.push(acc & mask);
        acc >>= bits;
        acc_bits -= bits as u32;
    }
    // Whatever is left in the accumulator is padding and must be zero.
    if acc != 0 {
        return Err(Error::Corrupt(
            "nonzero pad bits in final packed byte".to_string(),
        ));
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_bit_nibble_layout() {
        // First code goes into the low nibble.
        assert_eq!(pack_codes(&[15, 0], 4).unwrap(), vec![0x0F]);
        assert_eq!(pack_codes(&[0, 15], 4).unwrap(), vec![0xF0]);
    }

    #[test]
    fn three_bit_block_is_three_bytes() {
        let packed = pack_codes(&[1, 2, 3, 4, 5, 6, 7, 0], 3).unwrap();
        assert_eq!(packed.len(), 3);
        assert_eq!(unpack_codes(&packed, 3, 8).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 0]);
    }

    #[test]
    fn million_codes_at_three_bits() {
        let codes: Vec<u32> = (0..1_000_000u32).map(|i| i % 8).collect();
        let packed = pack_codes(&codes, 3).unwrap();
        assert_eq!(packed.len(), 375_000);
        assert_eq!(unpack_codes(&packed, 3, codes.len()).unwrap(), codes);
    }

    #[test]
    fn out_of_range_code_names_index() {
        let err = pack_codes(&[0, 1, 9, 2], 3).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn nonzero_pad_bits_rejected() {
        let mut packed = pack_codes(&[7, 7, 7], 3).unwrap(); // 9 bits in 2 bytes
        packed[1] |= 0b1000_0000;
        let err = unpack_codes(&packed, 3, 3).unwrap_err();
        assert!(err.to_string().contains("pad bits"), "{err}");
    }

    #[test]
    fn wrong_length_rejected() {
        let packed = pack_codes(&[1, 2, 3], 4).unwrap();
        assert!(unpack_codes(&packed, 4, 5).is_err());
        assert!(unpack_codes(&packed, 4, 2).is_err());
    }

    #[test]
    fn eight_bit_passthrough() {
        let codes: Vec<u32> = (0..=255).collect();
        let packed = pack_codes(&codes, 8).unwrap();
        assert_eq!(packed.len(), 256);
        assert_eq!(unpack_codes(&packed, 8, 256).unwrap(), codes);
    }
}
