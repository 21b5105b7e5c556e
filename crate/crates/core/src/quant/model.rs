use super::site::SiteQuantizer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DiTModel, ForwardPass, NoisePredictor, Operand, SiteHook};

/// A full-precision model plus fake-quantizers at its registry sites.
///
/// Quantized weights are computed once when a site is assigned.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    model: DiTModel,
    assignments: Vec<SiteQuantizer>,
    enabled: Vec<bool>,
    weights: Vec<Option<Tensor>>,
}

impl QuantizedModel {
    /// Every site starts at full precision and enabled.
    pub fn new(model: DiTModel) -> Self {
        let n = model.registry().len();
        QuantizedModel {
            model,
            assignments: vec![SiteQuantizer::FullPrecision; n],
            enabled: vec![true; n],
            weights: vec![None; n],
        }
    }

    pub fn model(&self) -> &DiTModel {
        &self.model
    }

    pub fn assignments(&self) -> &[SiteQuantizer] {
        &self.assignments
    }

    pub fn assignment(&self, site: usize) -> &SiteQuantizer {
        &self.assignments[site]
    }

    pub fn quantized_weight(&self, site: usize) -> Option<&Tensor> {
        self.weights[site].as_ref()
    }

    pub fn assign(&mut self, site: usize, quantizer: SiteQuantizer) -> Result<()> {
        let info = self
            .model
            .registry()
            .get(site)
            .ok_or_else(|| Error::Domain(format!("site index {site} out of range")))?
            .clone();
        quantizer.validate()?;
        let weight = match (&quantizer, info.kind.is_linear()) {
            (SiteQuantizer::FullPrecision, _) => None,
            (SiteQuantizer::Linear { weight, .. }, true) => {
                let name = info.weight_name().expect("linear site owns a weight");
                let w = self.model.param(&name).expect("registered weight exists");
                Some(weight.apply(w)?)
            }
            (SiteQuantizer::MatMul { .. }, false) => None,
            _ => {
                return Err(Error::Config(format!(
                    "quantizer type does not fit {} site {}",
                    info.kind, info.id
                )))
            }
        };
        self.assignments[site] = quantizer;
        self.weights[site] = weight;
        Ok(())
    }

    pub fn set_enabled(&mut self, site: usize, enabled: bool) {
        self.enabled[site] = enabled;
    }

    pub fn set_all_enabled(&mut self, enabled: bool) {
        self.enabled.iter_mut().for_each(|e| *e = enabled);
    }

    pub fn is_enabled(&self, site: usize) -> bool {
        self.enabled[site]
    }

    pub fn forward(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        self.model.forward_with(x, t, y, Some(self))
    }

    pub fn forward_pass(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<ForwardPass> {
        self.model.forward_pass(x, t, y, Some(self), false)
    }
}

impl SiteHook for QuantizedModel {
    fn weight(&self, site: usize) -> Option<&Tensor> {
        if !self.enabled[site] {
            return None;
        }
        self.weights[site].as_ref()
    }

    fn operand(
        &self,
        site: usize,
        operand: Operand,
        value: &Tensor,
        timesteps: &[usize],
    ) -> Result<Option<Tensor>> {
        if !self.enabled[site] {
            return Ok(None);
        }
        let act = match (&self.assignments[site], operand) {
            (SiteQuantizer::Linear { input, .. }, Operand::Lhs) => input,
            (SiteQuantizer::MatMul { lhs, .. }, Operand::Lhs) => lhs,
            (SiteQuantizer::MatMul { rhs, .. }, Operand::Rhs) => rhs,
            _ => return Ok(None),
        };
        let data = act.apply(value.data(), timesteps).map_err(|e| {
            let id = &self.model.registry().sites()[site].id;
            Error::Contract(format!("quantizing {operand:?} of site {id}: {e}"))
        })?;
        Tensor::new(value.shape().to_vec(), data).map(Some)
    }
}

impl NoisePredictor for QuantizedModel {
    fn timesteps(&self) -> usize {
        self.model.config().timesteps
    }

    fn predict(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        self.forward(x, t, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiTConfig;
    use crate::quant::{init_minmax, ActQuant, Quantizer, WeightQuant};

    fn tiny() -> DiTModel {
        let c = DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            num_classes: 3,
            timesteps: 10,
        };
        DiTModel::random(c, 3, 0.3).unwrap()
    }

    fn coarse_linear() -> SiteQuantizer {
        let p = init_minmax(&[-2.0, 2.0], 3).unwrap().params;
        SiteQuantizer::Linear {
            weight: WeightQuant::PerTensor { params: p },
            input: ActQuant::Static {
                quantizer: Quantizer::Uniform(p),
            },
        }
    }

    #[test]
    fn disabled_quantizers_reproduce_full_precision() {
        let m = tiny();
        let x = Tensor::full(&[2, 1, 8, 8], 0.3);
        let fp = m.forward(&x, &[1, 8], &[0, 2]).unwrap();
        let mut q = QuantizedModel::new(m);
        let sites = q.model().registry().len();
        for i in 0..sites {
            if q.model().site_kind(i).unwrap().is_linear() {
                q.assign(i, coarse_linear()).unwrap();
            }
        }
        assert_ne!(q.forward(&x, &[1, 8], &[0, 2]).unwrap(), fp);
        q.set_all_enabled(false);
        assert_eq!(q.forward(&x, &[1, 8], &[0, 2]).unwrap(), fp);
    }

    #[test]
    fn mismatched_quantizer_type_is_rejected() {
        let mut q = QuantizedModel::new(tiny());
        let qk = q.model().registry().index_of("blocks.0.attn.qk").unwrap();
        assert!(matches!(q.assign(qk, coarse_linear()), Err(Error::Config(_))));
        assert!(q.assign(0, coarse_linear()).is_ok());
    }
}
