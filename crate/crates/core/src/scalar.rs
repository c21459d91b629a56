//! Floating point scalars the whole crate is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// f32 or f64.
///
/// 64-bit is used for every verification path (finite differences need the
/// headroom); 32-bit is the training default.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    /// Tag written into checkpoints and volume sidecars.
    const DTYPE: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from f64 constants.
    #[inline]
    fn c(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 constant representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Runtime precision selector, used where the scalar type is chosen from
/// configuration (CLI `--precision`, checkpoint headers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => f32::DTYPE,
            Precision::F64 => f64::DTYPE,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn from_dtype(tag: &str) -> Option<Self> {
        match tag {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}
