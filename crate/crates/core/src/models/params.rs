//! Flat parameter vectors and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FNAMPV01"
//! 8       8     layout hash (u64)
//! 16      8     value count (u64)
//! 24      8·n   values (f64)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FNAMPV01";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: u64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: u64) -> Self {
        Self { values, layout }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self::new(vec![0.0; other.len()], other.layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout_hash(&self) -> u64 {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.layout.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Format(format!(
                "checkpoint truncated: {} header bytes, need 24",
                bytes.len()
            )));
        }
        if &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(&bytes[0..8])
            )));
        }
        let layout = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let payload = &bytes[24..];
        if payload.len() != count.saturating_mul(8) {
            return Err(Error::Format(format!(
                "checkpoint declares {count} values but carries {} bytes",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { values, layout })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// 64-bit FNV-1a, used to fingerprint model shapes.
pub(crate) fn fnv1a(tag: &[u8], words: &[usize]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    };
    tag.iter().copied().for_each(&mut eat);
    for w in words {
        (*w as u64).to_le_bytes().into_iter().for_each(&mut eat);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_layout() {
        let p = ParamVector::new(vec![1.0, -0.5], 0xABCD);
        let b = p.to_bytes();
        assert_eq!(&b[0..8], b"FNAMPV01");
        assert_eq!(&b[8..16], &0xABCDu64.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
        assert_eq!(ParamVector::from_bytes(&b).unwrap(), p);
    }

    #[test]
    fn rejects_bad_files() {
        let mut b = ParamVector::new(vec![1.0], 1).to_bytes();
        assert!(ParamVector::from_bytes(&b[..20]).is_err());
        b.pop();
        assert!(ParamVector::from_bytes(&b).is_err());
        let mut b = ParamVector::new(vec![1.0], 1).to_bytes();
        b[0] = b'X';
        assert!(matches!(ParamVector::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn fnv_distinguishes_shapes() {
        assert_ne!(fnv1a(b"mlp", &[2, 3]), fnv1a(b"mlp", &[3, 2]));
        assert_ne!(fnv1a(b"mlp", &[2, 3]), fnv1a(b"nam", &[2, 3]));
    }
}
