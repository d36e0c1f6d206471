use std::fmt;

use super::CodecError;

/// A packed bit sequence, MSB-first within each byte.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        BitString { bytes: Vec::with_capacity(bits.div_ceil(8)), len: 0 }
    }

    /// Number of bits written.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn push(&mut self, bit: bool) {
        let offset = self.len % 8;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> offset;
        }
        self.len += 1;
    }

    /// Append the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for i in (0..width).rev() {
            self.push((value >> i) & 1 == 1);
        }
    }

    pub fn push_zeros(&mut self, count: usize) {
        for _ in 0..count {
            self.push(false);
        }
    }

    pub fn get(&self, index: usize) -> Option<bool> {
        (index < self.len).then(|| self.bytes[index / 8] & (0x80 >> (index % 8)) != 0)
    }

    pub fn extend(&mut self, other: &BitString) {
        for i in 0..other.len {
            self.push(other.get(i).unwrap());
        }
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { bits: self, pos: 0 }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString(\"{self}\")")
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i).unwrap() { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BitString {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = BitString::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => out.push(false),
                '1' => out.push(true),
                _ => return Err(CodecError::InvalidDigit(c)),
            }
        }
        Ok(out)
    }
}

/// Sequential cursor over a [`BitString`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bits: &'a BitString,
    pos: usize,
}

impl BitReader<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bits.len - self.pos
    }

    pub fn read_bit(&mut self) -> Result<bool, CodecError> {
        let bit = self.bits.get(self.pos).ok_or(CodecError::Truncated { at: self.pos })?;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64, CodecError> {
        if self.remaining() < width as usize {
            return Err(CodecError::Truncated { at: self.bits.len });
        }
        let mut value = 0u64;
        for _ in 0..width {
            value = (value << 1) | self.read_bit()? as u64;
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_packing() {
        let mut b = BitString::new();
        b.push_bits(0b101, 3);
        b.push_bits(0b11110, 5);
        b.push(true);
        assert_eq!(b.len(), 9);
        assert_eq!(b.as_bytes(), &[0b1011_1110, 0b1000_0000]);
        assert_eq!(b.to_string(), "101111101");
    }

    #[test]
    fn reader_reports_truncation() {
        let b: BitString = "101".parse().unwrap();
        let mut r = b.reader();
        assert_eq!(r.read_bits(2).unwrap(), 0b10);
        assert!(matches!(r.read_bits(2), Err(CodecError::Truncated { .. })));
        assert!(r.read_bit().unwrap());
        assert!(r.read_bit().is_err());
    }

    #[test]
    fn parse_rejects_other_digits() {
        assert!("10a".parse::<BitString>().is_err());
    }
}
