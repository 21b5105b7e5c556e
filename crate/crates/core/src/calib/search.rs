use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{snap_softmax_step, softmax_coarse_step, MultiRegionParams, QuantParams};

/// What the values of a [`CandidateSet`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScheme {
    /// Absolute step sizes `γ·s_init` sharing the initial zero point.
    StepSweep,
    /// Factors `γ` applied to every per-channel step at once.
    ChannelScale,
    /// Fine softmax steps on the admissible lattice.
    SoftmaxFine,
}

/// Ordered trial values for one quantizer parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub scheme: CandidateScheme,
    pub values: Vec<f64>,
    /// Value reproducing the initialization; always present in `values`.
    pub init: f64,
}

/// Sweep factors `γ_j = (count/5 + j)/count`, `j = 0..count`: a uniform
/// grid from 0.2 in steps of `1/count` that contains 1.0 exactly.
pub fn sweep_factors(count: usize) -> Result<Vec<f64>> {
    if count == 0 || count % 5 != 0 {
        return Err(Error::Config(format!(
            "candidate count {count} must be a positive multiple of 5"
        )));
    }
    Ok((0..count).map(|j| (count / 5 + j) as f64 / count as f64).collect())
}

/// Step-size sweep around a uniform initialization.
pub fn uniform_candidates(init: &QuantParams, count: usize) -> Result<CandidateSet> {
    Ok(CandidateSet {
        scheme: CandidateScheme::StepSweep,
        values: sweep_factors(count)?.iter().map(|g| g * init.s).collect(),
        init: init.s,
    })
}

/// Step-size sweep around an arbitrary positive step.
pub fn step_candidates(init: f64, count: usize) -> Result<CandidateSet> {
    Ok(CandidateSet {
        scheme: CandidateScheme::StepSweep,
        values: sweep_factors(count)?.iter().map(|g| g * init).collect(),
        init,
    })
}

pub fn channel_candidates(count: usize) -> Result<CandidateSet> {
    Ok(CandidateSet {
        scheme: CandidateScheme::ChannelScale,
        values: sweep_factors(count)?,
        init: 1.0,
    })
}

/// Fine-step candidates of the softmax quantizer: the snapped sweep around
/// `init.s1` together with `s2 / 2^m` for `m = 1..k−1`, ascending.
pub fn softmax_candidates(init: &MultiRegionParams, count: usize) -> Result<CandidateSet> {
    let bits = init.bits;
    let s2 = softmax_coarse_step(bits);
    let mut values: Vec<f64> = sweep_factors(count)?
        .iter()
        .map(|g| snap_softmax_step(g * init.s1, bits))
        .chain((1..bits).map(|m| s2 / f64::from(1u32 << m)))
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(CandidateSet {
        scheme: CandidateScheme::SoftmaxFine,
        values,
        init: init.s1,
    })
}

/// Index and objective of the best candidate. Exact ties go to the larger
/// step. Objectives are evaluated in parallel; selection is sequential.
pub fn search_best<T, S, F>(candidates: &[T], step: S, objective: F) -> Result<(usize, f64)>
where
    T: Sync,
    S: Fn(&T) -> f64,
    F: Fn(&T) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Calibration("empty candidate set".into()));
    }
    let scores = candidates
        .par_iter()
        .map(&objective)
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Calibration(format!("candidate {i} has NaN objective")));
        }
        let (b, bs) = (scores[best], step(&candidates[best]));
        if v < b || (v == b && step(&candidates[i]) > bs) {
            best = i;
        }
    }
    Ok((best, scores[best]))
}
