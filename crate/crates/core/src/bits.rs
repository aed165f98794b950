//! Packed binary codes.
//!
//! Bit 1 (the most important unit) is the most significant bit of byte 0;
//! this is the order the prefix tree walks and the order on disk.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    len: usize,
    bytes: Vec<u8>,
}

pub fn bytes_for(k: usize) -> usize {
    k.div_ceil(8)
}

impl BitCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; bytes_for(len)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, b) in bits.iter().enumerate() {
            code.set(i, *b);
        }
        code
    }

    /// Packed bytes; trailing pad bits must be zero.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != bytes_for(len) {
            return Err(Error::dims(bytes_for(len), bytes.len(), "packed code bytes"));
        }
        let pad = bytes.len() * 8 - len;
        if pad > 0 && bytes[bytes.len() - 1] & ((1u8 << pad) - 1) != 0 {
            return Err(Error::Format("nonzero padding bits in packed code".into()));
        }
        Ok(Self { len, bytes })
    }

    /// Parse a hex string in the packed byte layout.
    pub fn from_hex(len: usize, hex: &str) -> Result<Self> {
        let hex = hex.trim().trim_start_matches("0x");
        if hex.len() != 2 * bytes_for(len) {
            return Err(Error::invalid(format!(
                "hex query has {} digits, expected {} for K={len}",
                hex.len(),
                2 * bytes_for(len)
            )));
        }
        let bytes = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
            .collect::<std::result::Result<Vec<u8>, _>>()
            .map_err(|e| Error::invalid(format!("bad hex: {e}")))?;
        Self::from_bytes(len, bytes)
    }

    pub fn to_hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Zero-based bit access.
    #[inline]
    pub fn get(&self, i: usize) -> bool {
        bit_of(&self.bytes, i)
    }

    pub fn set(&mut self, i: usize, value: bool) {
        let mask = 0x80u8 >> (i % 8);
        if value {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Keep the first `b` bits, zeroing the rest.
    pub fn truncated(&self, b: usize) -> Self {
        let mut out = self.clone();
        for i in b.min(self.len)..self.len {
            out.set(i, false);
        }
        out
    }
}

#[inline]
pub(crate) fn bit_of(bytes: &[u8], i: usize) -> bool {
    bytes[i / 8] & (0x80u8 >> (i % 8)) != 0
}

/// Number of leading bits two packed codes share, capped at `len`.
pub fn common_prefix_len(a: &[u8], b: &[u8], len: usize) -> usize {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let diff = x ^ y;
        if diff != 0 {
            return (i * 8 + diff.leading_zeros() as usize).min(len);
        }
    }
    len
}

/// Full Hamming distance between packed codes.
pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    let mut acc = 0u32;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_ne_bytes(x.try_into().expect("chunk of 8"));
        let y = u64::from_ne_bytes(y.try_into().expect("chunk of 8"));
        acc += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += (x ^ y).count_ones();
    }
    acc
}
