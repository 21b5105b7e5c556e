use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Variance schedule of the forward noising chain.
///
/// Tables are indexed by model timestep `t ∈ 0..T`; entry `t` holds the
/// values of diffusion step `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Sampling standard deviation, `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.betas[t].sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Domain(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }

    /// Closed-form forward corruption `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`, one
    /// timestep per leading-dimension entry.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::Dimension(format!(
                "x0 shape {:?} differs from noise shape {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let batch = x0.shape().first().copied().unwrap_or(0);
        if t.len() != batch {
            return Err(Error::Dimension(format!(
                "{} timesteps for a batch of {batch}",
                t.len()
            )));
        }
        let per = x0.numel() / batch.max(1);
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let (a, b) = (self.alpha_bar(ti).sqrt(), (1.0 - self.alpha_bar(ti)).sqrt());
            let r = i * per..(i + 1) * per;
            out.extend(
                x0.data()[r.clone()]
                    .iter()
                    .zip(&eps.data()[r])
                    .map(|(x, e)| a * x + b * e),
            );
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// Reverse-process mean `μ_θ` for 1-based diffusion `step`.
    pub fn posterior_mean(&self, x: &Tensor, eps_pred: &Tensor, step: usize) -> Result<Tensor> {
        if step == 0 || step > self.len() {
            return Err(Error::Domain(format!(
                "reverse step {step} outside 1..={}",
                self.len()
            )));
        }
        if x.shape() != eps_pred.shape() {
            return Err(Error::Dimension("x_t and predicted noise shapes differ".into()));
        }
        let t = step - 1;
        let coef = (1.0 - self.alpha(t)) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv = 1.0 / self.alpha(t).sqrt();
        let data = x
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(xv, e)| inv * (xv - coef * e))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}
