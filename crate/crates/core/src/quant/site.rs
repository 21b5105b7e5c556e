use serde::{Deserialize, Serialize};

use super::grouped::TimeGroupedParams;
use super::multi_region::MultiRegionParams;
use super::uniform::QuantParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A stateless elementwise quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Quantizer {
    Uniform(QuantParams),
    MultiRegion(MultiRegionParams),
}

impl Quantizer {
    pub fn bits(&self) -> u32 {
        match self {
            Quantizer::Uniform(p) => p.bits,
            Quantizer::MultiRegion(p) => p.bits,
        }
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Quantizer::Uniform(p) => Ok(p.quantize_slice(xs)),
            Quantizer::MultiRegion(p) => p.quantize_slice(xs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Quantizer::Uniform(p) => QuantParams::new(p.s, p.z, p.bits).map(|_| ()),
            Quantizer::MultiRegion(p) => p.validate(),
        }
    }
}

/// Activation quantizer of one site operand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActQuant {
    Static { quantizer: Quantizer },
    TimeGrouped { params: TimeGroupedParams },
}

impl ActQuant {
    pub fn bits(&self) -> u32 {
        match self {
            ActQuant::Static { quantizer } => quantizer.bits(),
            ActQuant::TimeGrouped { params } => params.groups[0].bits(),
        }
    }

    /// Quantizes `value`, whose leading dimension splits into one equal
    /// block per entry of `timesteps`.
    pub fn apply(&self, value: &[f64], timesteps: &[usize]) -> Result<Vec<f64>> {
        match self {
            ActQuant::Static { quantizer } => quantizer.quantize_slice(value),
            ActQuant::TimeGrouped { params } => {
                if timesteps.is_empty() || value.len() % timesteps.len() != 0 {
                    return Err(Error::Dimension(format!(
                        "{} values do not split into {} per-sample blocks",
                        value.len(),
                        timesteps.len()
                    )));
                }
                let per = value.len() / timesteps.len();
                let mut out = Vec::with_capacity(value.len());
                for (chunk, &t) in value.chunks(per).zip(timesteps) {
                    out.extend(params.quantize(chunk, t)?);
                }
                Ok(out)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActQuant::Static { quantizer } => quantizer.validate(),
            ActQuant::TimeGrouped { params } => {
                TimeGroupedParams::new(params.timesteps, params.groups.clone())?;
                params.groups.iter().try_for_each(Quantizer::validate)
            }
        }
    }
}

/// Weight quantizer of a linear site, weights stored `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "granularity", rename_all = "kebab-case")]
pub enum WeightQuant {
    PerTensor { params: QuantParams },
    PerChannel { params: Vec<QuantParams> },
}

impl WeightQuant {
    pub fn bits(&self) -> u32 {
        match self {
            WeightQuant::PerTensor { params } => params.bits,
            WeightQuant::PerChannel { params } => params[0].bits,
        }
    }

    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        let data = match self {
            WeightQuant::PerTensor { params } => params.quantize_slice(w.data()),
            WeightQuant::PerChannel { params } => {
                let rows = w.shape().first().copied().unwrap_or(0);
                if rows != params.len() || rows == 0 {
                    return Err(Error::Dimension(format!(
                        "{} channel quantizers for {rows} output rows",
                        params.len()
                    )));
                }
                let cols = w.numel() / rows;
                w.data()
                    .chunks(cols)
                    .zip(params)
                    .flat_map(|(row, p)| p.quantize_slice(row))
                    .collect()
            }
        };
        Tensor::new(w.shape().to_vec(), data)
    }

    pub fn validate(&self) -> Result<()> {
        let all: &[QuantParams] = match self {
            WeightQuant::PerTensor { params } => std::slice::from_ref(params),
            WeightQuant::PerChannel { params } => params,
        };
        if all.is_empty() {
            return Err(Error::Domain("per-channel quantizer with no channels".into()));
        }
        all.iter()
            .try_for_each(|p| QuantParams::new(p.s, p.z, p.bits).map(|_| ()))
    }
}

/// Quantizers assigned to one registry site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SiteQuantizer {
    FullPrecision,
    Linear { weight: WeightQuant, input: ActQuant },
    MatMul { lhs: ActQuant, rhs: ActQuant },
}

impl SiteQuantizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            SiteQuantizer::FullPrecision => Ok(()),
            SiteQuantizer::Linear { weight, input } => {
                weight.validate()?;
                input.validate()
            }
            SiteQuantizer::MatMul { lhs, rhs } => {
                lhs.validate()?;
                rhs.validate()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_channel_uses_row_params() {
        let w = Tensor::new(vec![2, 2], vec![0.26, 0.26, 0.26, 0.26]).unwrap();
        let q = WeightQuant::PerChannel {
            params: vec![
                QuantParams::new(0.1, 0, 4).unwrap(),
                QuantParams::new(0.25, 0, 4).unwrap(),
            ],
        };
        let out = q.apply(&w).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(out.data()[2], 0.25);
    }

    #[test]
    fn grouped_activation_dispatches_per_sample() {
        let fine = Quantizer::Uniform(QuantParams::new(0.1, 0, 8).unwrap());
        let coarse = Quantizer::Uniform(QuantParams::new(1.0, 0, 8).unwrap());
        let act = ActQuant::TimeGrouped {
            params: TimeGroupedParams::new(10, vec![fine, coarse]).unwrap(),
        };
        let out = act.apply(&[0.33, 0.33, 0.33, 0.33], &[2, 7]).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-12 && (out[1] - 0.3).abs() < 1e-12);
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert!(act.apply(&[0.0; 3], &[0, 1]).is_err());
    }
}
