use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step size used when a tensor has no spread to measure.
pub const DEGENERATE_STEP: f64 = 1e-8;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!(
            "bit width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// Asymmetric uniform quantizer `x̂ = s·(clip(⌊x/s⌉ + z, 0, 2^k − 1) − z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub s: f64,
    pub z: i64,
    pub bits: u32,
}

/// Result of [`init_minmax`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMaxInit {
    pub params: QuantParams,
    /// Set when the input was constant and the fallback step was used.
    pub degenerate: bool,
}

impl QuantParams {
    pub fn new(s: f64, z: i64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Domain(format!("step size {s} must be positive and finite")));
        }
        let levels = (1i64 << bits) - 1;
        if !(0..=levels).contains(&z) {
            return Err(Error::Domain(format!("zero point {z} outside 0..={levels}")));
        }
        Ok(QuantParams { s, z, bits })
    }

    pub fn max_code(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        let z = self.z as f64;
        let code = ((x / self.s).round_ties_even() + z).clamp(0.0, self.max_code());
        self.s * (code - z)
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f64, f64) {
        let z = self.z as f64;
        (-self.s * z, self.s * (self.max_code() - z))
    }

    /// Copy with step `s` and the same zero point.
    pub fn with_step(&self, s: f64) -> Self {
        QuantParams { s, ..*self }
    }
}

/// Min-max initialization `s = (max − min)/(2^k − 1)`, `z = −⌊min/s⌉`.
///
/// The measured range is widened to contain zero so the zero point stays a
/// valid code. A constant input yields the fallback step with `z = 0`.
pub fn init_minmax(x: &[f64], bits: u32) -> Result<MinMaxInit> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::Domain("cannot initialize a quantizer from no data".into()));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value {v} in quantizer input")));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(MinMaxInit {
            params: QuantParams::new(DEGENERATE_STEP, 0, bits)?,
            degenerate: true,
        });
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let levels = ((1u64 << bits) - 1) as f64;
    let s = (hi - lo) / levels;
    let z = (-(lo / s).round_ties_even()).clamp(0.0, levels) as i64;
    Ok(MinMaxInit {
        params: QuantParams::new(s, z, bits)?,
        degenerate: false,
    })
}
