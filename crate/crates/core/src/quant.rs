//! Signed fixed-point quantization with `int_bits` integer and `frac_bits`
//! fraction bits.
//!
//! The representable grid is `k * 2^-frac_bits` for integer `k`, clipped to
//! `[-2^int_bits, 2^int_bits - 2^-frac_bits]`. Rounding goes to the nearest
//! grid point with ties toward positive infinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_INT_BITS: u8 = 3;
pub const MAX_FRAC_BITS: u8 = 6;

/// Serialized as the two-element array `[int_bits, frac_bits]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct QuantSpec {
    int_bits: u8,
    frac_bits: u8,
}

impl QuantSpec {
    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self> {
        if int_bits > MAX_INT_BITS || frac_bits > MAX_FRAC_BITS {
            return Err(Error::InvalidArgument(format!(
                "quantization ({int_bits} integer, {frac_bits} fraction bits) outside \
                 0..={MAX_INT_BITS} / 0..={MAX_FRAC_BITS}"
            )));
        }
        Ok(QuantSpec { int_bits, frac_bits })
    }

    pub fn int_bits(self) -> u8 {
        self.int_bits
    }

    pub fn frac_bits(self) -> u8 {
        self.frac_bits
    }

    pub fn step(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        -(self.int_bits as f64).exp2()
    }

    pub fn max_value(self) -> f64 {
        (self.int_bits as f64).exp2() - self.step()
    }
}

impl TryFrom<[u8; 2]> for QuantSpec {
    type Error = Error;

    fn try_from([i, f]: [u8; 2]) -> Result<Self> {
        QuantSpec::new(i, f)
    }
}

impl From<QuantSpec> for [u8; 2] {
    fn from(q: QuantSpec) -> Self {
        [q.int_bits, q.frac_bits]
    }
}

pub fn quantize_value(x: f32, q: QuantSpec) -> f32 {
    let scale = (q.frac_bits as f64).exp2();
    let lo = q.min_value() * scale;
    let hi = q.max_value() * scale;
    // Work in grid units; every grid point is exactly representable in f32.
    let k = (x as f64 * scale + 0.5).floor().clamp(lo, hi);
    (k / scale) as f32
}

pub fn quantize_tensor(t: &Tensor, q: QuantSpec) -> Tensor {
    t.map(|v| quantize_value(v, q))
}
