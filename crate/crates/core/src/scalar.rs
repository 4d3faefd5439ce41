use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Element type tag of the on-disk array container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// Interleaved `f32` pairs.
    C64,
    /// Interleaved `f64` pairs.
    C128,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::C64 => "c64",
            Dtype::C128 => "c128",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c64" => Some(Dtype::C64),
            "c128" => Some(Dtype::C128),
            _ => None,
        }
    }

    /// Bytes per complex element.
    pub fn element_bytes(self) -> usize {
        match self {
            Dtype::C64 => 8,
            Dtype::C128 => 16,
        }
    }
}

/// Real scalar the numerical core is generic over.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + rustfft::FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Machine epsilon as `f64`, used to pick precision-aware tolerances.
    const EPS: f64;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::C64;
    const EPS: f64 = f32::EPSILON as f64;
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::C128;
    const EPS: f64 = f64::EPSILON;
}
