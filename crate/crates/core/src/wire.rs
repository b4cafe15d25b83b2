//! Message precision on the simulated wire.
//!
//! Every scalar a node sends to a neighbor is rounded (nearest, ties to even) into
//! the IEEE binary16 / binary32 layout before the receiver uses it. Local state is
//! never rounded.

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum FloatWidth {
    F16,
    F32,
    #[default]
    F64,
}

impl FloatWidth {
    pub fn bits(self) -> u64 {
        match self {
            FloatWidth::F16 => 16,
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatWidth::F16 => f16::from_f64(x).to_f64(),
            FloatWidth::F32 => x as f32 as f64,
            FloatWidth::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self != FloatWidth::F64 {
            xs.iter_mut().for_each(|x| *x = self.round(*x));
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(FloatWidth::F16),
            32 => Ok(FloatWidth::F32),
            64 => Ok(FloatWidth::F64),
            other => Err(invalid("float_width", format!("{other} is not one of 16, 32, 64"))),
        }
    }
}

impl TryFrom<u32> for FloatWidth {
    type Error = crate::DcpError;

    fn try_from(bits: u32) -> Result<Self> {
        FloatWidth::from_bits(bits)
    }
}

impl From<FloatWidth> for u32 {
    fn from(w: FloatWidth) -> u32 {
        w.bits() as u32
    }
}

impl fmt::Display for FloatWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_rounds_to_nearest_even() {
        // spacing of binary16 in [1, 2) is 2^-10
        let ulp = 2f64.powi(-10);
        assert_eq!(FloatWidth::F16.round(1.0 + 0.5 * ulp), 1.0);
        assert_eq!(FloatWidth::F16.round(1.0 + 1.5 * ulp), 1.0 + 2.0 * ulp);
        assert_eq!(FloatWidth::F16.round(1.0 + 0.6 * ulp), 1.0 + ulp);
        assert_eq!(FloatWidth::F16.round(0.1), 0.0999755859375);
    }

    #[test]
    fn single_precision_matches_cast() {
        let x = 0.123456789012345;
        assert_eq!(FloatWidth::F32.round(x), (x as f32) as f64);
        assert_eq!(FloatWidth::F64.round(x), x);
    }

    #[test]
    fn serde_uses_bit_counts() {
        assert_eq!(serde_json::to_string(&FloatWidth::F32).unwrap(), "32");
        let w: FloatWidth = serde_json::from_str("16").unwrap();
        assert_eq!(w, FloatWidth::F16);
        assert!(serde_json::from_str::<FloatWidth>("8").is_err());
    }
}
