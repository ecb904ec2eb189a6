//! Numeric traits shared by the volumetric kernels.
//!
//! Float-valued operations (normalization, resampling, distance transforms,
//! probability maps) are written once against [`Real`] and instantiated for
//! `f32` and `f64`. On-disk voxel types implement [`Element`].

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumCast + Default + Debug + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; infallible for the supported types.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to any Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// NIfTI datatype codes of the supported subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemType {
    U8,
    I16,
    U16,
    F32,
}

impl ElemType {
    pub fn code(self) -> i16 {
        match self {
            ElemType::U8 => 2,
            ElemType::I16 => 4,
            ElemType::F32 => 16,
            ElemType::U16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(ElemType::U8),
            4 => Some(ElemType::I16),
            16 => Some(ElemType::F32),
            512 => Some(ElemType::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElemType::U8 => 1,
            ElemType::I16 | ElemType::U16 => 2,
            ElemType::F32 => 4,
        }
    }

    pub fn bitpix(self) -> i16 {
        (self.size() * 8) as i16
    }
}

/// A voxel type that can be stored in a NIfTI file.
pub trait Element: Copy + PartialEq + Debug + Default + ToPrimitive + Send + Sync + 'static {
    const ELEM: ElemType;

    /// Decodes one little-endian value; `bytes.len() == ELEM.size()`.
    fn read_le(bytes: &[u8]) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
}

impl Element for u8 {
    const ELEM: ElemType = ElemType::U8;

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

impl Element for i16 {
    const ELEM: ElemType = ElemType::I16;

    fn read_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes([bytes[0], bytes[1]])
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for u16 {
    const ELEM: ElemType = ElemType::U16;

    fn read_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes([bytes[0], bytes[1]])
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f32 {
    const ELEM: ElemType = ElemType::F32;

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
