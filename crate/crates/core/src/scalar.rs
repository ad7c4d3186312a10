//! Scalar abstraction for the tensor engine.
//!
//! All numeric kernels are written once against [`Scalar`] and instantiated
//! for `f64` (the default everywhere in this crate) and `f32`. The trait adds
//! the few things `num_traits::Float` lacks: checked casts to and from `f64`,
//! little-endian byte IO for the tensor file format, and a total-order bit
//! key used for canonical sorting.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element dtype tag stored in serialized tensor headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    /// Lossy cast from `f64`. Loss of precision is expected for `f32`.
    fn cast_from(v: f64) -> Self;

    /// Widening cast to `f64`.
    fn cast_f64(self) -> f64;

    /// Bit pattern padded to 64 bits. Only used as a deterministic sort key,
    /// so the exact mapping does not matter as long as equal values map to
    /// equal keys.
    fn key_bits(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from `bytes`, which must hold at least `BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn cast_from(v: f64) -> Self {
        v
    }

    fn cast_f64(self) -> f64 {
        self
    }

    fn key_bits(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn cast_from(v: f64) -> Self {
        v as f32
    }

    fn cast_f64(self) -> f64 {
        self as f64
    }

    fn key_bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// Shorthand for `S::cast_from` that reads better in arithmetic-heavy code.
pub fn s<S: Scalar>(v: f64) -> S {
    S::cast_from(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_le_bytes() {
        let vals = [0.0f64, -1.5, 3.25e-7, f64::MAX];
        for v in vals {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            assert_eq!(buf.len(), 8);
            assert_eq!(f64::read_le(&buf), v);
        }
        let mut buf = Vec::new();
        (2.5f32).write_le(&mut buf);
        assert_eq!(buf.len(), 4);
        assert_eq!(f32::read_le(&buf), 2.5f32);
    }

    #[test]
    fn dtype_codes_are_stable() {
        assert_eq!(DType::F64.code(), 0);
        assert_eq!(DType::F32.code(), 1);
        assert_eq!(DType::from_code(0), Some(DType::F64));
        assert_eq!(DType::from_code(1), Some(DType::F32));
        assert_eq!(DType::from_code(7), None);
    }

    #[test]
    fn key_bits_distinguish_sign() {
        assert_ne!(0.0f64.key_bits(), (-0.0f64).key_bits());
        assert_eq!(1.5f64.key_bits(), 1.5f64.key_bits());
    }
}
