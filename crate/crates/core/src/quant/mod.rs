//! Stochastic gradient quantization and its wire format.
//!
//! A vector `v` is mapped to `norm(v) * sign(v_i) * level_i / s` where each
//! level is an integer in `[0, s]` drawn so that the result is unbiased. The
//! wire format is the binary32 norm followed, per coordinate, by a sign bit
//! and the Elias-gamma code of `level + 1`.

mod bits;
pub mod elias;

pub use bits::{BitReader, BitString};
pub use elias::{decode as elias_decode, encode as elias_encode};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("quantization level s must be at least 1")]
    ZeroLevels,
    #[error("cannot quantize an empty vector")]
    Empty,
    #[error("component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("vector norm overflows")]
    NormOverflow,
    #[error("invalid block: {0}")]
    InvalidBlock(&'static str),
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bit stream ended at bit {at}")]
    Truncated { at: usize },
    #[error("Elias prefix starting at bit {at} is longer than 63 zeros")]
    Overlong { at: usize },
    #[error("decoded {consumed} of {total} bits; dimension does not match the stream")]
    LengthMismatch { consumed: usize, total: usize },
    #[error("decoded level {level} exceeds s = {s}")]
    LevelOutOfRange { level: u64, s: u32 },
    #[error("norm {0} is not a finite nonnegative binary32")]
    BadNorm(f32),
    #[error("norm does not fit in binary32")]
    NormOverflow,
    #[error("zero norm with nonzero levels")]
    ZeroNormNonzeroLevel,
    #[error("not a bit: {0:?}")]
    InvalidDigit(char),
}

/// Lossy representation of a vector on the grid `norm * {-s..s} / s`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    norm: f64,
    signs: Vec<i8>,
    levels: Vec<u32>,
    s: u32,
}

impl QuantizedBlock {
    pub fn new(norm: f64, signs: Vec<i8>, levels: Vec<u32>, s: u32) -> Result<Self, QuantError> {
        if s == 0 {
            return Err(QuantError::ZeroLevels);
        }
        if !(norm.is_finite() && norm >= 0.0) {
            return Err(QuantError::InvalidBlock("norm must be finite and nonnegative"));
        }
        if signs.len() != levels.len() {
            return Err(QuantError::InvalidBlock("signs and levels differ in length"));
        }
        if signs.iter().any(|&x| x != 1 && x != -1) {
            return Err(QuantError::InvalidBlock("signs must be +1 or -1"));
        }
        if levels.iter().any(|&l| l > s) {
            return Err(QuantError::InvalidBlock("level exceeds s"));
        }
        if norm == 0.0 && levels.iter().any(|&l| l != 0) {
            return Err(QuantError::InvalidBlock("zero norm with nonzero levels"));
        }
        Ok(QuantizedBlock { norm, signs, levels, s })
    }

    /// The all-zero block of dimension `d`.
    pub fn zero(d: usize, s: u32) -> Self {
        QuantizedBlock { norm: 0.0, signs: vec![1; d], levels: vec![0; d], s }
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn s(&self) -> u32 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    /// Count of coordinates that dequantize to a nonzero value.
    pub fn nonzeros(&self) -> usize {
        if self.norm == 0.0 {
            0
        } else {
            self.levels.iter().filter(|&&l| l != 0).count()
        }
    }

    /// The block as a receiver sees it: the norm narrowed to binary32.
    pub fn to_wire(&self) -> Result<Self, QuantError> {
        let narrow = self.norm as f32;
        if narrow.is_infinite() {
            return Err(QuantError::NormOverflow);
        }
        let mut out = self.clone();
        out.norm = narrow as f64;
        if out.norm == 0.0 {
            out.levels.iter_mut().for_each(|l| *l = 0);
        }
        Ok(out)
    }

    pub fn is_wire(&self) -> bool {
        (self.norm as f32) as f64 == self.norm
    }
}

/// Draw `Q_s(v)`.
pub fn quantize<R: Rng + ?Sized>(v: &[f64], s: u32, rng: &mut R) -> Result<QuantizedBlock, QuantError> {
    if s == 0 {
        return Err(QuantError::ZeroLevels);
    }
    if v.is_empty() {
        return Err(QuantError::Empty);
    }
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(QuantError::NonFinite { index, value });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(QuantError::NormOverflow);
    }
    let signs: Vec<i8> = v.iter().map(|&x| if x < 0.0 { -1 } else { 1 }).collect();
    if norm == 0.0 {
        return Ok(QuantizedBlock { norm, signs, levels: vec![0; v.len()], s });
    }
    let sf = s as f64;
    let levels = v
        .iter()
        .map(|&x| {
            let scaled = ((x.abs() / norm).min(1.0)) * sf;
            let floor = (scaled.floor() as u32).min(s);
            let p = scaled - floor as f64;
            // One uniform per coordinate regardless of p keeps stream
            // consumption independent of the data.
            let u: f64 = rng.random();
            if u < p {
                floor + 1
            } else {
                floor
            }
        })
        .collect();
    Ok(QuantizedBlock { norm, signs, levels, s })
}

pub fn dequantize(block: &QuantizedBlock) -> Vec<f64> {
    let s = block.s as f64;
    block
        .signs
        .iter()
        .zip(&block.levels)
        .map(|(&sign, &level)| block.norm * sign as f64 * level as f64 / s)
        .collect()
}

/// Bits `encode_block` emits for `block`.
pub fn encoded_len(block: &QuantizedBlock) -> usize {
    32 + block.levels.iter().map(|&l| 1 + elias::code_len(l as u64 + 1)).sum::<usize>()
}

pub fn encode_block(block: &QuantizedBlock) -> Result<BitString, CodecError> {
    let norm = block.norm as f32;
    if norm.is_infinite() {
        return Err(CodecError::NormOverflow);
    }
    let mut out = BitString::with_capacity(encoded_len(block));
    out.push_bits(norm.to_bits() as u64, 32);
    for (&sign, &level) in block.signs.iter().zip(&block.levels) {
        out.push(sign < 0);
        elias::encode_into(level as u64 + 1, &mut out);
    }
    Ok(out)
}

pub fn decode_block(bits: &BitString, d: usize, s: u32) -> Result<QuantizedBlock, CodecError> {
    let mut reader = bits.reader();
    let norm = f32::from_bits(reader.read_bits(32)? as u32);
    if !(norm.is_finite() && norm >= 0.0) {
        return Err(CodecError::BadNorm(norm));
    }
    let mut signs = Vec::with_capacity(d);
    let mut levels = Vec::with_capacity(d);
    for _ in 0..d {
        signs.push(if reader.read_bit()? { -1 } else { 1 });
        let level = elias::decode_from(&mut reader)? - 1;
        if level > s as u64 {
            return Err(CodecError::LevelOutOfRange { level, s });
        }
        levels.push(level as u32);
    }
    if reader.remaining() != 0 {
        return Err(CodecError::LengthMismatch { consumed: reader.position(), total: bits.len() });
    }
    if norm == 0.0 && levels.iter().any(|&l| l != 0) {
        return Err(CodecError::ZeroNormNonzeroLevel);
    }
    Ok(QuantizedBlock { norm: norm as f64, signs, levels, s })
}

/// Upper bound on the expected number of nonzeros in `Q_s(v)`:
/// `min(s^2 + s sqrt(d), d)`.
pub fn sparsity_bound(d: usize, s: u32) -> f64 {
    let (d, s) = (d as f64, s as f64);
    (s * s + s * d.sqrt()).min(d)
}

/// Width of the norm field in the wire format.
pub const NORM_BITS: usize = 32;

/// The published bound on expected encoded length:
/// `F + 2d + d log2((s^2 + 2 s sqrt(d) + 1 + d/4) / d)` with `F = 32`.
///
/// When `s^2 + 2 s sqrt(d) + 1 + d/4 < d` this drops below `F + 2d`, the
/// shortest possible encoding, so it cannot hold there. See
/// [`code_length_bound_jensen`] for a bound that always does.
pub fn expected_code_length_bound(d: usize, s: u32) -> f64 {
    let (df, sf) = (d as f64, s as f64);
    NORM_BITS as f64 + 2.0 * df + df * ((sf * sf + 2.0 * sf * df.sqrt() + 1.0 + df / 4.0) / df).log2()
}

/// Expected-length bound from Jensen's inequality with the per-coordinate
/// `+1` offset summed over all `d` coordinates:
/// `F + 2d + d log2((s^2 + 2 s sqrt(d) + d + d/4) / d)`.
pub fn code_length_bound_jensen(d: usize, s: u32) -> f64 {
    let (df, sf) = (d as f64, s as f64);
    NORM_BITS as f64 + 2.0 * df + df * ((sf * sf + 2.0 * sf * df.sqrt() + df + df / 4.0) / df).log2()
}

/// How a vector travels over a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Compressor {
    /// Full precision; accounted as 32 bits per element.
    Lossless,
    /// Stochastic quantization with `levels` positive grid points.
    Qsgd { levels: u32 },
}

impl Compressor {
    pub fn is_lossless(self) -> bool {
        matches!(self, Compressor::Lossless)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Seed};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn stream(i: u64) -> crate::rng::Stream {
        Seed(11).stream(Purpose::Verify, &[i])
    }

    #[test]
    fn zero_vector() {
        let b = quantize(&[0.0, 0.0, 0.0], 4, &mut stream(0)).unwrap();
        assert_eq!(b.norm(), 0.0);
        assert_eq!(b.levels(), &[0, 0, 0]);
        assert_eq!(b.signs(), &[1, 1, 1]);
        assert_eq!(dequantize(&b), vec![0.0; 3]);
    }

    #[test]
    fn exact_grid_point_is_deterministic() {
        for i in 0..50 {
            let b = quantize(&[5.0, 0.0, 0.0], 1, &mut stream(i)).unwrap();
            assert_eq!(dequantize(&b), vec![5.0, 0.0, 0.0]);
        }
        // Ratio 1/2 with s = 4 sits on the grid at level 2.
        for i in 0..50 {
            let b = quantize(&[1.0, 1.0, 1.0, 1.0], 4, &mut stream(i)).unwrap();
            assert_eq!(b.levels(), &[2, 2, 2, 2]);
        }
    }

    #[test]
    fn negative_and_zero_signs() {
        let b = quantize(&[-3.0, 0.0, 4.0], 8, &mut stream(1)).unwrap();
        assert_eq!(b.signs(), &[-1, 1, 1]);
        assert_eq!(b.levels()[1], 0);
    }

    #[test]
    fn two_outcome_frequencies() {
        // v = [3, 4], s = 1: coordinate 1 is 5 w.p. 0.6, coordinate 2 w.p. 0.8.
        let n = 200_000;
        let mut rng = stream(2);
        let mut hits = [0usize; 2];
        for _ in 0..n {
            let out = dequantize(&quantize(&[3.0, 4.0], 1, &mut rng).unwrap());
            for (h, &x) in hits.iter_mut().zip(&out) {
                assert!(x == 0.0 || x == 5.0);
                *h += (x == 5.0) as usize;
            }
        }
        for (h, p) in hits.iter().zip([0.6, 0.8]) {
            let freq = *h as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(quantize(&[1.0], 0, &mut stream(0)), Err(QuantError::ZeroLevels));
        assert_eq!(quantize(&[], 2, &mut stream(0)), Err(QuantError::Empty));
        assert!(matches!(
            quantize(&[1.0, f64::NAN], 2, &mut stream(0)),
            Err(QuantError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(quantize(&[f64::INFINITY], 2, &mut stream(0)), Err(QuantError::NonFinite { .. })));
    }

    #[test]
    fn dequantize_formula() {
        let b = QuantizedBlock::new(5.0, vec![1, 1], vec![1, 0], 1).unwrap();
        assert_eq!(dequantize(&b), vec![5.0, 0.0]);
        let b = QuantizedBlock::new(2.0, vec![-1, 1, 1], vec![3, 1, 0], 4).unwrap();
        assert_eq!(dequantize(&b), vec![-1.5, 0.5, 0.0]);
        assert_eq!(dequantize(&QuantizedBlock::zero(4, 3)), vec![0.0; 4]);
    }

    #[test]
    fn block_validation() {
        assert!(QuantizedBlock::new(1.0, vec![1], vec![2], 1).is_err());
        assert!(QuantizedBlock::new(0.0, vec![1], vec![1], 1).is_err());
        assert!(QuantizedBlock::new(-1.0, vec![1], vec![0], 1).is_err());
        assert!(QuantizedBlock::new(1.0, vec![0], vec![0], 1).is_err());
        assert!(QuantizedBlock::new(1.0, vec![1, 1], vec![0], 1).is_err());
    }

    #[test]
    fn encoded_length_examples() {
        let b = QuantizedBlock::new(1.0, vec![1; 4], vec![1, 1, 0, 0], 2).unwrap();
        let bits = encode_block(&b).unwrap();
        assert_eq!(bits.len(), 32 + 4 + (3 + 3 + 1 + 1));
        assert_eq!(bits.len(), 44);
        assert_eq!(encoded_len(&b), 44);
        let z = QuantizedBlock::zero(3, 5);
        assert_eq!(encode_block(&z).unwrap().len(), 38);
    }

    #[test]
    fn exact_bit_layout() {
        let b = QuantizedBlock::new(1.0, vec![-1, 1], vec![2, 0], 4).unwrap();
        let bits = encode_block(&b).unwrap().to_string();
        assert_eq!(&bits[..32], format!("{:032b}", 1.0f32.to_bits()));
        // sign 1, Elias(3) = 011, sign 0, Elias(1) = 1
        assert_eq!(&bits[32..], "101101");
    }

    #[test]
    fn decode_with_wrong_dimension() {
        let b = QuantizedBlock::new(1.0, vec![1; 4], vec![1, 1, 0, 0], 2).unwrap();
        let bits = encode_block(&b).unwrap();
        assert!(matches!(decode_block(&bits, 3, 2), Err(CodecError::LengthMismatch { .. })));
        assert!(matches!(decode_block(&bits, 5, 2), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode_block(&bits, 4, 0), Err(CodecError::LevelOutOfRange { .. })));
    }

    #[test]
    fn wire_narrowing() {
        let b = QuantizedBlock::new(0.1, vec![1], vec![1], 1).unwrap();
        assert!(!b.is_wire());
        let w = b.to_wire().unwrap();
        assert!(w.is_wire());
        assert_eq!(w.norm(), 0.1f32 as f64);
        let tiny = QuantizedBlock::new(1e-300, vec![1], vec![1], 1).unwrap();
        assert_eq!(tiny.to_wire().unwrap().levels(), &[0]);
        let huge = QuantizedBlock::new(1e300, vec![1], vec![1], 1).unwrap();
        assert_eq!(huge.to_wire(), Err(QuantError::NormOverflow));
        assert_eq!(encode_block(&huge), Err(CodecError::NormOverflow));
    }

    #[test]
    fn roundtrip_random_blocks() {
        let mut rng = stream(3);
        for i in 0..1000 {
            let d = 1 + i % 37;
            let s = 1 + (i as u32 % 20);
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b = quantize(&v, s, &mut rng).unwrap().to_wire().unwrap();
            let bits = encode_block(&b).unwrap();
            assert_eq!(bits.len(), encoded_len(&b));
            assert_eq!(decode_block(&bits, d, s).unwrap(), b);
        }
    }

    #[test]
    fn scale_equivariance_shared_stream() {
        let mut rng = stream(4);
        for i in 0..200 {
            let v: Vec<f64> = (0..9).map(|_| StandardNormal.sample(&mut rng)).collect();
            for c in [0.25, 2.0, 1024.0] {
                let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
                let a = dequantize(&quantize(&cv, 3, &mut stream(100 + i)).unwrap());
                let b: Vec<f64> =
                    dequantize(&quantize(&v, 3, &mut stream(100 + i)).unwrap()).iter().map(|x| c * x).collect();
                assert_eq!(a, b);
            }
            // Non-dyadic scale: equal up to rounding.
            let cv: Vec<f64> = v.iter().map(|x| 3.7 * x).collect();
            let a = dequantize(&quantize(&cv, 3, &mut stream(100 + i)).unwrap());
            let b = dequantize(&quantize(&v, 3, &mut stream(100 + i)).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - 3.7 * y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn sparsity_bound_values() {
        assert_eq!(sparsity_bound(1024, 1), 33.0);
        assert_eq!(sparsity_bound(4, 4), 4.0);
        assert_eq!(sparsity_bound(64, 1), 9.0);
    }

    #[test]
    fn code_length_bound_values() {
        // Independent high-precision evaluation: 370.85888318936778...
        assert!((expected_code_length_bound(1024, 1) - 370.858_883_189_367_8).abs() < 1e-9);
        assert!((expected_code_length_bound(1024, 4) - 1_104.254_886_004_762_4).abs() < 1e-9);
        for d in [1usize, 8, 64, 1024, 4096] {
            let mut prev = f64::NEG_INFINITY;
            for s in 1..=64 {
                let b = expected_code_length_bound(d, s);
                assert!(b >= prev);
                assert!(code_length_bound_jensen(d, s) >= b);
                prev = b;
            }
        }
    }

    #[test]
    fn published_bound_below_minimum_length_when_s_small() {
        let floor = (NORM_BITS + 2 * 1024) as f64;
        assert!(expected_code_length_bound(1024, 1) < floor);
        assert!(code_length_bound_jensen(1024, 1) >= floor);
    }

    proptest! {
        #[test]
        fn quantize_invariants(v in prop::collection::vec(-1e6f64..1e6, 1..40), s in 1u32..64, seed in 0u64..1000) {
            let b = quantize(&v, s, &mut stream(seed)).unwrap();
            prop_assert!(b.levels().iter().all(|&l| l <= s));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (i, &x) in v.iter().enumerate() {
                if norm > 0.0 {
                    let r = x.abs() / norm * s as f64;
                    prop_assert!((b.levels()[i] as f64 - r).abs() < 1.0 + 1e-9);
                }
            }
            let w = b.to_wire().unwrap();
            let bits = encode_block(&w).unwrap();
            prop_assert_eq!(decode_block(&bits, v.len(), s).unwrap(), w);
        }
    }
}
