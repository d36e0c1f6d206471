//! Elias-gamma code for positive integers.
//!
//! `k` is written as `floor(log2 k)` zeros followed by the binary digits of
//! `k` (which always start with a one), `2 * floor(log2 k) + 1` bits total.

use super::{BitReader, BitString, CodecError};

/// Number of bits `encode_into(k)` emits.
pub fn code_len(k: u64) -> usize {
    assert!(k >= 1, "Elias-gamma is defined for k >= 1");
    2 * k.ilog2() as usize + 1
}

pub fn encode_into(k: u64, out: &mut BitString) {
    assert!(k >= 1, "Elias-gamma is defined for k >= 1");
    let width = k.ilog2();
    out.push_zeros(width as usize);
    out.push_bits(k, width + 1);
}

pub fn encode(k: u64) -> BitString {
    let mut out = BitString::with_capacity(code_len(k));
    encode_into(k, &mut out);
    out
}

pub fn decode_from(reader: &mut BitReader<'_>) -> Result<u64, CodecError> {
    let start = reader.position();
    let mut zeros = 0u32;
    while !reader.read_bit()? {
        zeros += 1;
        if zeros > 63 {
            return Err(CodecError::Overlong { at: start });
        }
    }
    let rest = reader.read_bits(zeros)?;
    Ok((1u64 << zeros) | rest)
}

/// Decode one value from the front of `bits`; returns the value and the
/// number of bits it occupied.
pub fn decode(bits: &BitString) -> Result<(u64, usize), CodecError> {
    let mut reader = bits.reader();
    let k = decode_from(&mut reader)?;
    Ok((k, reader.position()))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Hand-built reference table.
    const TABLE: &[(u64, &str)] = &[
        (1, "1"),
        (2, "010"),
        (3, "011"),
        (4, "00100"),
        (5, "00101"),
        (7, "00111"),
        (8, "0001000"),
        (15, "0001111"),
        (16, "000010000"),
    ];

    #[test]
    fn matches_reference_table() {
        for &(k, code) in TABLE {
            assert_eq!(encode(k).to_string(), code, "k = {k}");
            assert_eq!(code_len(k), code.len());
        }
    }

    #[test]
    fn exhaustive_roundtrip_to_2_pow_16() {
        for k in 1..=(1u64 << 16) {
            let bits = encode(k);
            assert_eq!(bits.len(), 2 * (63 - k.leading_zeros() as usize) + 1);
            assert_eq!(decode(&bits).unwrap(), (k, bits.len()));
        }
    }

    #[test]
    fn decode_stops_at_code_boundary() {
        let bits: BitString = "0010111".parse().unwrap();
        assert_eq!(decode(&bits).unwrap(), (5, 5));
    }

    #[test]
    fn all_zero_stream_is_truncated() {
        let bits: BitString = "0000".parse().unwrap();
        assert!(matches!(decode(&bits), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode(&BitString::new()), Err(CodecError::Truncated { .. })));
        // Prefix announces more digits than the stream holds.
        let bits: BitString = "0001".parse().unwrap();
        assert!(matches!(decode(&bits), Err(CodecError::Truncated { .. })));
    }

    #[test]
    fn largest_value() {
        let bits = encode(u64::MAX);
        assert_eq!(bits.len(), 127);
        assert_eq!(decode(&bits).unwrap().0, u64::MAX);
    }
}
