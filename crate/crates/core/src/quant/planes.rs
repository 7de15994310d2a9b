//! Packed binary planes: 8 entries per byte, row-major, bit 0 of each byte
//! holds the first entry of that byte. Padding bits past the last entry are
//! always zero so popcounts and byte images are canonical.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitPlane {
    len: usize,
    bytes: Vec<u8>,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        BitPlane {
            len,
            bytes: vec![0; packed_len(len)],
        }
    }

    /// Builds a plane whose entry `k` is `bit` of `codes[k]`.
    pub fn from_code_bit(codes: &[u8], bit: u32) -> Self {
        let mut plane = BitPlane::zeros(codes.len());
        for (chunk, byte) in codes.chunks(8).zip(plane.bytes.iter_mut()) {
            let mut packed = 0u8;
            for (offset, code) in chunk.iter().enumerate() {
                packed |= ((code >> bit) & 1) << offset;
            }
            *byte = packed;
        }
        plane
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut plane = BitPlane::zeros(bits.len());
        for (k, &b) in bits.iter().enumerate() {
            if b {
                plane.bytes[k / 8] |= 1 << (k % 8);
            }
        }
        plane
    }

    /// Wraps raw packed bytes, rejecting wrong lengths and set padding bits.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != packed_len(len) {
            return Err(Error::Corrupt(format!(
                "plane of {len} entries needs {} bytes, got {}",
                packed_len(len),
                bytes.len()
            )));
        }
        let tail = len % 8;
        if tail != 0 {
            let last = *bytes.last().expect("non-empty when tail != 0");
            if last >> tail != 0 {
                return Err(Error::Corrupt("non-zero padding bits in plane".into()));
            }
        }
        Ok(BitPlane { len, bytes })
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

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        debug_assert!(k < self.len);
        (self.bytes[k / 8] >> (k % 8)) & 1 == 1
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |k| self.get(k))
    }
}

pub fn packed_len(len: usize) -> usize {
    len.div_ceil(8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_lsb_first_within_byte() {
        let plane = BitPlane::from_bits(&[true, false, false, true, false, false, false, false, true]);
        assert_eq!(plane.as_bytes(), &[0b0000_1001, 0b0000_0001]);
        assert_eq!(plane.count_ones(), 3);
        assert!(plane.get(8));
    }

    #[test]
    fn code_bits_extract() {
        let codes = [0b10u8, 0b11, 0b01];
        let lsb = BitPlane::from_code_bit(&codes, 0);
        let msb = BitPlane::from_code_bit(&codes, 1);
        assert_eq!(lsb.iter().collect::<Vec<_>>(), vec![false, true, true]);
        assert_eq!(msb.iter().collect::<Vec<_>>(), vec![true, true, false]);
    }

    #[test]
    fn rejects_dirty_padding() {
        assert!(BitPlane::from_bytes(3, vec![0b0000_1000]).is_err());
        assert!(BitPlane::from_bytes(3, vec![0b0000_0111]).is_ok());
        assert!(BitPlane::from_bytes(9, vec![0]).is_err());
    }
}
