//! Fixed-width 2048-bit fingerprints.
//!
//! Bit `i` lives in word `i / 64` at position `i % 64`. The byte encoding used
//! on the wire is little-endian: bit `i` is bit `i % 8` of byte `i / 8`.

use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const FINGERPRINT_BITS: usize = 2048;
pub const FINGERPRINT_BYTES: usize = FINGERPRINT_BITS / 8;
const WORDS: usize = FINGERPRINT_BITS / 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("fingerprint must be {FINGERPRINT_BITS} bits, got {0}")]
    LengthMismatch(usize),
    #[error("invalid base64: {0}")]
    Base64(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint([u64; WORDS]);

impl Default for Fingerprint {
    fn default() -> Self {
        Self::zeros()
    }
}

impl Fingerprint {
    pub const fn zeros() -> Self {
        Fingerprint([0; WORDS])
    }

    pub const fn ones() -> Self {
        Fingerprint([u64::MAX; WORDS])
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(bits: I) -> Self {
        let mut fp = Self::zeros();
        for b in bits {
            fp.set(b);
        }
        fp
    }

    /// Builds a fingerprint from a slice of booleans, one per bit.
    pub fn from_bools(bits: &[bool]) -> Result<Self, FingerprintError> {
        if bits.len() != FINGERPRINT_BITS {
            return Err(FingerprintError::LengthMismatch(bits.len()));
        }
        Ok(Self::from_indices(
            bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i),
        ))
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % FINGERPRINT_BITS;
        self.0[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < FINGERPRINT_BITS && (self.0[bit / 64] >> (bit % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(wi, &w)| {
            let mut word = w;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let tz = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(wi * 64 + tz)
            })
        })
    }

    pub fn intersection_count(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    pub fn union_count(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a | b).count_ones())
            .sum()
    }

    /// Tanimoto (Jaccard) similarity. Two empty fingerprints are identical,
    /// so they score 1.0.
    pub fn tanimoto(&self, other: &Self) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 1.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }

    pub fn to_bytes(&self) -> [u8; FINGERPRINT_BYTES] {
        let mut out = [0u8; FINGERPRINT_BYTES];
        for (i, w) in self.0.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FingerprintError> {
        if bytes.len() != FINGERPRINT_BYTES {
            return Err(FingerprintError::LengthMismatch(bytes.len() * 8));
        }
        let mut words = [0u64; WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
            *w = u64::from_le_bytes(buf);
        }
        Ok(Fingerprint(words))
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.to_bytes())
    }

    pub fn from_base64(s: &str) -> Result<Self, FingerprintError> {
        let bytes = BASE64
            .decode(s)
            .map_err(|e| FingerprintError::Base64(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({} bits set)", self.count_ones())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Fingerprint::from_base64(&s).map_err(serde::de::Error::custom)
    }
}
