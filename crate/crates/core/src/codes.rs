//! Bit-packed ±1 hash codes.
//!
//! A [`BitCode`] of length `h` stores code value `+1` as a set bit and `-1` as
//! a cleared bit. Position `k` (zero-based) holds code bit `b_{k+1}`; it lives
//! in word `k / 64` at bit `k % 64`. Bits past `h` in the last word are always
//! zero, so derived equality and hashing agree with code equality.
//!
//! Codes print most-significant position first, `(b_h … b_1)`, which is the
//! order that makes the printed code and its table index read the same way:
//!
//! ```
//! use hashbound::codes::{code_to_index, BitCode};
//!
//! let b = BitCode::from_signs(&[1, 1, -1, -1]).unwrap();
//! assert_eq!(b.to_string(), "(-1-1+1+1)");
//! assert_eq!(code_to_index(&b).unwrap(), 3);
//! ```

use std::fmt;

use crate::error::{invalid, Error, Result};

/// Widest code for which an exact `2^h` probability table is supported.
pub const MAX_TABLE_BITS: usize = 16;

const WORD_BITS: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitCode {
    words: Vec<u64>,
    len: usize,
}

impl BitCode {
    /// The all `-1` code of length `len`.
    pub fn negative(len: usize) -> Result<Self> {
        if len == 0 {
            return invalid("code length must be at least 1");
        }
        Ok(Self {
            words: vec![0; len.div_ceil(WORD_BITS)],
            len,
        })
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        let mut code = Self::negative(bits.len())?;
        for (k, &b) in bits.iter().enumerate() {
            if b {
                code.words[k / WORD_BITS] |= 1 << (k % WORD_BITS);
            }
        }
        Ok(code)
    }

    /// Build from `±1` values; any other value is rejected.
    pub fn from_signs(values: &[i8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                1 => Ok(true),
                -1 => Ok(false),
                other => invalid(format!("code values must be +1 or -1, got {other}")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bools(&bits)
    }

    /// Build from packed bytes, bit `k` of the code at bit `k % 8` of byte
    /// `k / 8`. Padding bits of the final byte must be zero.
    pub fn from_le_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        let mut code = Self::negative(len)?;
        if bytes.len() != len.div_ceil(8) {
            return invalid(format!(
                "{} bytes cannot hold exactly {len} bits",
                bytes.len()
            ));
        }
        if len % 8 != 0 && bytes[bytes.len() - 1] >> (len % 8) != 0 {
            return Err(Error::Format("non-zero padding bits in code record".into()));
        }
        for (i, &byte) in bytes.iter().enumerate() {
            code.words[i / 8] |= u64::from(byte) << (8 * (i % 8));
        }
        Ok(code)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        (0..n)
            .map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Always false; codes have at least one bit.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `true` when position `k` holds `+1`.
    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        self.words[k / WORD_BITS] >> (k % WORD_BITS) & 1 == 1
    }

    pub fn sign(&self, k: usize) -> i8 {
        if self.bit(k) {
            1
        } else {
            -1
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        (0..self.len).map(|k| self.sign(k)).collect()
    }

    pub fn bools(&self) -> Vec<bool> {
        (0..self.len).map(|k| self.bit(k)).collect()
    }

    /// Code values as `±1.0` reals, the form fed to networks.
    pub fn to_reals(&self) -> Vec<f64> {
        (0..self.len).map(|k| f64::from(self.sign(k))).collect()
    }

    pub fn flip(&mut self, k: usize) {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        self.words[k / WORD_BITS] ^= 1 << (k % WORD_BITS);
    }

    pub fn flipped(&self, k: usize) -> Self {
        let mut c = self.clone();
        c.flip(k);
        c
    }

    pub fn complement(&self) -> Self {
        let mut c = self.clone();
        for w in &mut c.words {
            *w = !*w;
        }
        c.clear_tail();
        c
    }

    /// Number of `+1` positions.
    pub fn count_positive(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// The contiguous sub-code covering positions `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len {
            return invalid(format!(
                "slice {start}..{} exceeds {}-bit code",
                start + len,
                self.len
            ));
        }
        let bits: Vec<bool> = (start..start + len).map(|k| self.bit(k)).collect();
        Self::from_bools(&bits)
    }

    /// Concatenate codes, earlier codes occupying lower positions.
    pub fn concat(parts: &[BitCode]) -> Result<Self> {
        let bits: Vec<bool> = parts.iter().flat_map(|p| p.bools()).collect();
        Self::from_bools(&bits)
    }

    /// Hamming distance without the length check. Callers guarantee equal
    /// lengths.
    pub(crate) fn distance_unchecked(&self, other: &BitCode) -> u32 {
        debug_assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn hamming(&self, other: &BitCode) -> Result<u32> {
        hamming_distance(self, other)
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            let last = self.words.len() - 1;
            self.words[last] &= (1u64 << rem) - 1;
        }
    }
}

impl fmt::Display for BitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for k in (0..self.len).rev() {
            f.write_str(if self.bit(k) { "+1" } else { "-1" })?;
        }
        f.write_str(")")
    }
}

impl fmt::Debug for BitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitCode{self}")
    }
}

/// Real-valued model output before binarization. All entries are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct RealCode {
    values: Vec<f64>,
}

impl RealCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("real code must have at least one entry");
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("entry {k} is not finite ({})", values[k]));
        }
        Ok(Self { values })
    }

    /// Lift a binary code to its `±1` real embedding.
    pub fn from_code(code: &BitCode) -> Self {
        Self {
            values: code.to_reals(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn binarize(&self) -> BitCode {
        let bits: Vec<bool> = self.values.iter().map(|&v| v >= 0.0).collect();
        BitCode::from_bools(&bits).expect("RealCode is never empty")
    }
}

/// Sign binarization: `+1` where the value is `>= 0`, `-1` otherwise. Zero
/// maps to `+1`.
pub fn binarize(values: &[f64]) -> Result<BitCode> {
    Ok(RealCode::new(values.to_vec())?.binarize())
}

pub fn hamming_distance(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.len != b.len {
        return invalid(format!(
            "cannot compare a {}-bit code with a {}-bit code",
            a.len, b.len
        ));
    }
    Ok(a.distance_unchecked(b))
}

/// Table index of a code: bit `k-1` of the index is set iff `b_k = +1`.
pub fn code_to_index(code: &BitCode) -> Result<usize> {
    if code.len > MAX_TABLE_BITS {
        return Err(Error::UnsupportedWidth {
            bits: code.len,
            max: MAX_TABLE_BITS,
        });
    }
    Ok(code.words[0] as usize)
}

pub fn index_to_code(index: usize, len: usize) -> Result<BitCode> {
    if len > MAX_TABLE_BITS {
        return Err(Error::UnsupportedWidth {
            bits: len,
            max: MAX_TABLE_BITS,
        });
    }
    if index >= 1usize << len {
        return invalid(format!("index {index} out of range for {len}-bit codes"));
    }
    let mut code = BitCode::negative(len)?;
    code.words[0] = index as u64;
    Ok(code)
}
