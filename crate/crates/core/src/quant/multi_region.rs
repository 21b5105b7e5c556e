//! Two-region quantizers for post-softmax and post-GELU activations.
//!
//! Codes spend one bit on the region and `k − 1` bits on the index within
//! the region, so both regions together use at most `2^k` levels.

use serde::{Deserialize, Serialize};

use super::uniform::check_bits;
use crate::error::{Error, Result};

/// Inputs to the softmax quantizer may stray this far outside `[0, 1]`.
pub const SOFTMAX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionKind {
    PostSoftmax,
    PostGelu,
}

/// Step sizes of a two-region quantizer.
///
/// Post-softmax: `s1` is the fine step below the boundary `2^{k−1}·s1`, and
/// `s2 = 2^{−(k−1)}` is the fixed coarse step above it. `s1` lives on the
/// lattice `j / 2^{2(k−1)}`, `1 ≤ j ≤ 2^{k−1}`, which puts the boundary on
/// the coarse grid and keeps the map monotone.
///
/// Post-GELU: `s1` quantizes the negative half on `−2^{k−1}..=0`, `s2` the
/// positive half on `0..2^{k−1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiRegionParams {
    pub kind: RegionKind,
    pub s1: f64,
    pub s2: f64,
    pub bits: u32,
}

fn half(bits: u32) -> f64 {
    (1u64 << (bits - 1)) as f64
}

/// Fixed coarse step of the softmax quantizer, `2^{−(k−1)}`.
pub fn softmax_coarse_step(bits: u32) -> f64 {
    1.0 / half(bits)
}

/// Nearest admissible fine step for the softmax quantizer.
pub fn snap_softmax_step(s1: f64, bits: u32) -> f64 {
    let h = half(bits);
    let j = (s1 * h * h).round_ties_even().clamp(1.0, h);
    j / (h * h)
}

impl MultiRegionParams {
    pub fn softmax(s1: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let h = half(bits);
        let j = s1 * h * h;
        if !(s1 > 0.0 && j.fract() == 0.0 && (1.0..=h).contains(&j)) {
            return Err(Error::Domain(format!(
                "softmax fine step {s1} is not j/2^{} with 1 <= j <= {h}",
                2 * (bits - 1)
            )));
        }
        Ok(MultiRegionParams {
            kind: RegionKind::PostSoftmax,
            s1,
            s2: softmax_coarse_step(bits),
            bits,
        })
    }

    pub fn gelu(s1: f64, s2: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        for s in [s1, s2] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Domain(format!("step size {s} must be positive and finite")));
            }
        }
        Ok(MultiRegionParams {
            kind: RegionKind::PostGelu,
            s1,
            s2,
            bits,
        })
    }

    /// Re-checks the invariants of a deserialized value.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = match self.kind {
            RegionKind::PostSoftmax => Self::softmax(self.s1, self.bits)?,
            RegionKind::PostGelu => Self::gelu(self.s1, self.s2, self.bits)?,
        };
        if rebuilt != *self {
            return Err(Error::Domain(format!(
                "softmax coarse step must be {}, got {}",
                rebuilt.s2, self.s2
            )));
        }
        Ok(())
    }

    /// Start of the coarse region of the softmax quantizer.
    pub fn boundary(&self) -> f64 {
        half(self.bits) * self.s1
    }

    /// Quantizes one value. Softmax inputs must lie in `[0, 1]` up to
    /// [`SOFTMAX_TOLERANCE`].
    #[inline]
    pub fn quantize(&self, x: f64) -> Result<f64> {
        let h = half(self.bits);
        match self.kind {
            RegionKind::PostSoftmax => {
                if !(-SOFTMAX_TOLERANCE..=1.0 + SOFTMAX_TOLERANCE).contains(&x) {
                    return Err(Error::Contract(format!(
                        "post-softmax value {x} outside [0, 1]"
                    )));
                }
                let a = x.clamp(0.0, 1.0) + 0.0;
                let fine = (a / self.s1).round_ties_even();
                if fine < h {
                    Ok(fine * self.s1)
                } else {
                    Ok((a / self.s2).round_ties_even().clamp(0.0, h - 1.0) * self.s2)
                }
            }
            RegionKind::PostGelu => {
                if x < 0.0 {
                    // `+ 0.0` folds a negative zero into the positive one
                    Ok((x / self.s1).round_ties_even().clamp(-h, 0.0) * self.s1 + 0.0)
                } else {
                    Ok((x / self.s2).round_ties_even().clamp(0.0, h - 1.0) * self.s2)
                }
            }
        }
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    /// Step size that governs `x`'s rounding error when `x` is in range.
    pub fn step_at(&self, x: f64) -> f64 {
        match self.kind {
            RegionKind::PostSoftmax if (x / self.s1).round_ties_even() < half(self.bits) => self.s1,
            RegionKind::PostSoftmax => self.s2,
            RegionKind::PostGelu if x < 0.0 => self.s1,
            RegionKind::PostGelu => self.s2,
        }
    }
}

/// Initial softmax step: the fine region covers `[0, min(max a, 1)]`.
pub fn init_softmax(a: &[f64], bits: u32) -> Result<MultiRegionParams> {
    check_bits(bits)?;
    let hi = a.iter().copied().fold(0.0, f64::max).min(1.0);
    MultiRegionParams::softmax(snap_softmax_step(hi / half(bits), bits), bits)
}

/// Initial GELU steps from the negative and positive extremes of `x`.
pub fn init_gelu(x: &[f64], bits: u32) -> Result<MultiRegionParams> {
    check_bits(bits)?;
    let h = half(bits);
    let lo = x.iter().copied().fold(0.0, f64::min);
    let hi = x.iter().copied().fold(0.0, f64::max);
    let s1 = if lo < 0.0 { -lo / h } else { super::DEGENERATE_STEP };
    let s2 = if hi > 0.0 { hi / (h - 1.0) } else { super::DEGENERATE_STEP };
    MultiRegionParams::gelu(s1, s2, bits)
}
