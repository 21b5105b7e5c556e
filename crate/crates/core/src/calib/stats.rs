use rayon::prelude::*;

use super::dataset::CalibrationDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DiTModel, SiteKind};

/// Samples per forward/backward graph while recording statistics.
const STATS_CHUNK: usize = 16;

/// Recorded operands, outputs, and squared output gradients of one site,
/// stored sample-major in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteStats {
    pub kind: SiteKind,
    /// Per-sample shapes.
    pub lhs_shape: Vec<usize>,
    pub rhs_shape: Option<Vec<usize>>,
    pub out_shape: Vec<usize>,
    pub lhs: Vec<f32>,
    pub rhs: Option<Vec<f32>>,
    pub output: Vec<f32>,
    /// `(∂L/∂out)²`, the diagonal Fisher weights.
    pub g2: Vec<f32>,
}

impl SiteStats {
    fn per(shape: &[usize]) -> usize {
        shape.iter().product()
    }

    pub fn samples(&self) -> usize {
        self.g2.len() / Self::per(&self.out_shape).max(1)
    }

    pub fn lhs_of(&self, sample: usize) -> &[f32] {
        let n = Self::per(&self.lhs_shape);
        &self.lhs[sample * n..(sample + 1) * n]
    }

    pub fn rhs_of(&self, sample: usize) -> Option<&[f32]> {
        let n = Self::per(self.rhs_shape.as_ref()?);
        self.rhs.as_ref().map(|r| &r[sample * n..(sample + 1) * n])
    }

    pub fn output_of(&self, sample: usize) -> &[f32] {
        let n = Self::per(&self.out_shape);
        &self.output[sample * n..(sample + 1) * n]
    }

    pub fn g2_of(&self, sample: usize) -> &[f32] {
        let n = Self::per(&self.out_shape);
        &self.g2[sample * n..(sample + 1) * n]
    }
}

/// Per-site statistics over a whole calibration dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    /// Indexed like the model registry.
    pub sites: Vec<SiteStats>,
    /// Timestep of each sample.
    pub timesteps: Vec<usize>,
}

impl LayerStats {
    pub fn num_samples(&self) -> usize {
        self.timesteps.len()
    }

    /// Number of `(site, sample)` records.
    pub fn record_count(&self) -> usize {
        self.sites.iter().map(SiteStats::samples).sum()
    }
}

fn per_sample_shape(shape: &[usize], batch: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] /= batch;
    s
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.to_f32_vec()
}

/// Forward and backward passes of `Σ‖ε − ε_θ‖²` over every calibration
/// sample, recording each site's operands and squared output gradients.
pub fn collect_layer_stats(model: &DiTModel, dataset: &CalibrationDataset) -> Result<LayerStats> {
    if dataset.is_empty() {
        return Err(Error::Calibration("calibration dataset is empty".into()));
    }
    let registry = model.registry();
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(STATS_CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let len = STATS_CHUNK.min(n - start);
            let (x, t, y, eps) = dataset.batch(start, len)?;
            let pass = model.forward_pass(&x, &t, &y, None, true)?;
            let mut graph = pass.graph;
            let target = graph.constant(eps);
            let diff = graph.sub(pass.output, target)?;
            let loss = graph.sum_squares(diff);
            let grads = graph.backward(loss)?;
            pass.sites
                .iter()
                .enumerate()
                .map(|(i, nodes)| {
                    let site = &registry.sites()[i];
                    let g = grads.get(nodes.output).ok_or_else(|| {
                        Error::Calibration(format!("no gradient reached site {}", site.id))
                    })?;
                    if !g.is_finite() {
                        return Err(Error::Calibration(format!(
                            "non-finite gradient at site {}",
                            site.id
                        )));
                    }
                    let out = graph.value(nodes.output);
                    let lhs = graph.value(nodes.lhs);
                    let rhs = (!site.kind.is_linear()).then(|| graph.value(nodes.rhs));
                    Ok(SiteStats {
                        kind: site.kind,
                        lhs_shape: per_sample_shape(lhs.shape(), len),
                        rhs_shape: rhs.map(|r| per_sample_shape(r.shape(), len)),
                        out_shape: per_sample_shape(out.shape(), len),
                        lhs: to_f32(lhs),
                        rhs: rhs.map(to_f32),
                        output: to_f32(out),
                        g2: g.data().iter().map(|v| (v * v) as f32).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut iter = chunks.into_iter();
    let mut sites = iter.next().expect("non-empty dataset");
    for chunk in iter {
        for (acc, part) in sites.iter_mut().zip(chunk) {
            acc.lhs.extend(part.lhs);
            if let (Some(a), Some(b)) = (acc.rhs.as_mut(), part.rhs) {
                a.extend(b);
            }
            acc.output.extend(part.output);
            acc.g2.extend(part.g2);
        }
    }
    Ok(LayerStats {
        sites,
        timesteps: dataset.timestep_list(),
    })
}
