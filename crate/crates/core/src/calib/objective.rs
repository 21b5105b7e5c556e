//! Site-local output discrepancy weighted by squared loss gradients.

use serde::{Deserialize, Serialize};

use super::stats::SiteStats;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DiTModel, SiteKind};

/// Weighting of the output discrepancy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Squared-gradient (diagonal Fisher) weights.
    Hessian,
    /// Unit weights, plain squared error.
    Mse,
}

/// `Σ_i g2_i · Δ_i²`.
pub fn ho_objective(delta: &[f64], g2: &[f64]) -> Result<f64> {
    if delta.len() != g2.len() {
        return Err(Error::Dimension(format!(
            "discrepancy has {} entries but weights have {}",
            delta.len(),
            g2.len()
        )));
    }
    Ok(delta.iter().zip(g2).map(|(d, g)| g * (d * d)).sum())
}

/// One calibration sample of a site, in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSample {
    pub t: usize,
    /// Linear: input `[rows, in]`. Matmul: left factor `[batch, m, k]`.
    pub lhs: Tensor,
    /// Matmul only: right factor `[batch, k, n]`, or `[batch, n, k]` for
    /// sites that multiply by its transpose.
    pub rhs: Option<Tensor>,
    /// Squared output gradients, shaped like the site output.
    pub g2: Tensor,
}

/// Everything needed to calibrate one site in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteProblem {
    pub id: String,
    pub kind: SiteKind,
    /// Linear sites: weight `[out, in]`.
    pub weight: Option<Tensor>,
    pub bias: Option<Vec<f64>>,
    pub samples: Vec<SiteSample>,
    /// Number of diffusion timesteps, for time grouping.
    pub timesteps: usize,
}

impl SiteProblem {
    /// Builds the problem for registry site `index` from recorded statistics.
    pub fn from_stats(model: &DiTModel, stats: &SiteStats, index: usize, timesteps: &[usize]) -> Result<Self> {
        let site = model
            .registry()
            .get(index)
            .ok_or_else(|| Error::Domain(format!("site index {index} out of range")))?;
        let to64 = |v: &[f32], shape: &[usize]| Tensor::from_f32(shape.to_vec(), v);
        let samples = (0..stats.samples())
            .map(|s| {
                Ok(SiteSample {
                    t: timesteps[s],
                    lhs: to64(stats.lhs_of(s), &stats.lhs_shape)?,
                    rhs: match (stats.rhs_of(s), &stats.rhs_shape) {
                        (Some(r), Some(shape)) => Some(to64(r, shape)?),
                        _ => None,
                    },
                    g2: to64(stats.g2_of(s), &stats.out_shape)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (weight, bias) = match (site.weight_name(), site.bias_name()) {
            (Some(w), Some(b)) => (
                model.param(&w).cloned(),
                model.param(&b).map(|t| t.data().to_vec()),
            ),
            _ => (None, None),
        };
        let problem = SiteProblem {
            id: site.id.clone(),
            kind: site.kind,
            weight,
            bias,
            samples,
            timesteps: model.config().timesteps,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Calibration(format!("site {} has no samples", self.id)));
        }
        let geom = Geometry::of(self)?;
        for s in &self.samples {
            if s.t >= self.timesteps {
                return Err(Error::Domain(format!("sample timestep {} out of range", s.t)));
            }
            if s.g2.data().iter().any(|g| !(*g >= 0.0)) {
                return Err(Error::Domain(format!(
                    "site {} has negative or NaN squared gradients",
                    self.id
                )));
            }
            geom.check(s)?;
        }
        Ok(())
    }
}

/// Shape bookkeeping shared by all samples of a site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Geometry {
    Linear { rows: usize, inp: usize, out: usize },
    MatMul { batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
}

impl Geometry {
    pub(crate) fn of(p: &SiteProblem) -> Result<Self> {
        let first = &p.samples[0];
        let bad = |what: &str| Error::Dimension(format!("site {}: {what}", p.id));
        if p.kind.is_linear() {
            let w = p.weight.as_ref().ok_or_else(|| bad("linear site without weight"))?;
            let (out, inp) = match w.shape() {
                &[o, i] => (o, i),
                _ => return Err(bad("weight must be 2-D")),
            };
            let rows = first.lhs.numel() / inp.max(1);
            if let Some(b) = &p.bias {
                if b.len() != out {
                    return Err(bad("bias length differs from output width"));
                }
            }
            Ok(Geometry::Linear { rows, inp, out })
        } else {
            let rhs = first.rhs.as_ref().ok_or_else(|| bad("matmul site without right operand"))?;
            let (batch, m, k) = match first.lhs.shape() {
                &[b, m, k] => (b, m, k),
                _ => return Err(bad("left operand must be 3-D")),
            };
            let trans_b = p.kind.transposed_rhs();
            let n = match (rhs.shape(), trans_b) {
                (&[b, kk, n], false) if b == batch && kk == k => n,
                (&[b, n, kk], true) if b == batch && kk == k => n,
                _ => return Err(bad("right operand shape does not fit the left operand")),
            };
            Ok(Geometry::MatMul { batch, m, k, n, trans_b })
        }
    }

    fn check(&self, s: &SiteSample) -> Result<()> {
        let ok = match *self {
            Geometry::Linear { rows, inp, out } => {
                s.lhs.numel() == rows * inp && s.g2.numel() == rows * out && s.rhs.is_none()
            }
            Geometry::MatMul { batch, m, k, n, .. } => {
                s.lhs.numel() == batch * m * k
                    && s.rhs.as_ref().map(Tensor::numel) == Some(batch * k * n)
                    && s.g2.numel() == batch * m * n
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("calibration samples disagree in shape".into()))
        }
    }

    pub(crate) fn out_len(&self) -> usize {
        match *self {
            Geometry::Linear { rows, out, .. } => rows * out,
            Geometry::MatMul { batch, m, n, .. } => batch * m * n,
        }
    }

    /// Puts a right operand into the `[k, n]`-per-batch layout the kernel
    /// reads: weights `[out, in]` become `[in, out]`; transposed matmul
    /// factors `[batch, n, k]` become `[batch, k, n]`.
    pub(crate) fn kernel_rhs(&self, rhs: &[f64]) -> Vec<f64> {
        match *self {
            Geometry::Linear { inp, out, .. } => transpose(rhs, 1, out, inp),
            Geometry::MatMul { batch, k, n, trans_b: true, .. } => transpose(rhs, batch, n, k),
            Geometry::MatMul { .. } => rhs.to_vec(),
        }
    }

    /// Site output for a left operand and a kernel-layout right operand.
    ///
    /// Each output element accumulates `bias + Σ_k lhs·rhs` in increasing
    /// `k`, the same order as a textbook triple loop.
    pub(crate) fn forward(&self, lhs: &[f64], rhs_k: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
        match *self {
            Geometry::Linear { rows, inp, out: width } => {
                for r in 0..rows {
                    let y = &mut out[r * width..(r + 1) * width];
                    match bias {
                        Some(b) => y.copy_from_slice(b),
                        None => y.fill(0.0),
                    }
                    axpy_rows(&lhs[r * inp..(r + 1) * inp], rhs_k, y);
                }
            }
            Geometry::MatMul { batch, m, k, n, .. } => {
                for b in 0..batch {
                    let a = &lhs[b * m * k..(b + 1) * m * k];
                    let bm = &rhs_k[b * k * n..(b + 1) * k * n];
                    for i in 0..m {
                        let y = &mut out[(b * m + i) * n..(b * m + i + 1) * n];
                        y.fill(0.0);
                        axpy_rows(&a[i * k..(i + 1) * k], bm, y);
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy_rows(x: &[f64], rows: &[f64], y: &mut [f64]) {
    let n = y.len();
    for (kk, &xv) in x.iter().enumerate() {
        let row = &rows[kk * n..(kk + 1) * n];
        for (yv, &w) in y.iter_mut().zip(row) {
            *yv += xv * w;
        }
    }
}

fn transpose(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Weighted discrepancy of one sample, accumulated in row-major order.
#[inline]
pub(crate) fn weighted_sq(out: &[f64], reference: &[f64], g2: Option<&[f64]>) -> f64 {
    match g2 {
        Some(g) => out
            .iter()
            .zip(reference)
            .zip(g)
            .map(|((o, r), g)| {
                let d = o - r;
                g * (d * d)
            })
            .sum(),
        None => out
            .iter()
            .zip(reference)
            .map(|(o, r)| {
                let d = o - r;
                d * d
            })
            .sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(ho_objective(&[0.0, 0.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ho_objective(&[1.0, 2.0], &[0.5, 0.25]).unwrap(), 1.5);
        assert_eq!(ho_objective(&[1.0, -2.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert!(ho_objective(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn kernels_match_triple_loops() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.37 - 1.0).collect();
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).sin()).collect();
        let b = [0.1, -0.2, 0.3, 0.05];
        let g = Geometry::Linear { rows: 2, inp: 3, out: 4 };
        let mut y = vec![0.0; 8];
        g.forward(&x, &g.kernel_rhs(&w), Some(&b), &mut y);
        for r in 0..2 {
            for o in 0..4 {
                let mut acc = b[o];
                for i in 0..3 {
                    acc += x[r * 3 + i] * w[o * 3 + i];
                }
                assert_eq!(y[r * 4 + o], acc);
            }
        }
        // batched, transposed right factor: [1, 2, 3] x [1, 4, 3]^T
        let g = Geometry::MatMul { batch: 1, m: 2, k: 3, n: 4, trans_b: true };
        let mut y = vec![0.0; 8];
        g.forward(&x, &g.kernel_rhs(&w), None, &mut y);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for kk in 0..3 {
                    acc += x[i * 3 + kk] * w[j * 3 + kk];
                }
                assert_eq!(y[i * 4 + j], acc);
            }
        }
    }
}
