use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::sampler::{item_rng, standard_normal};
use super::schedule::NoiseSchedule;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DiTConfig, DiTModel};

/// Samples per forward/backward graph; gradients of the chunks are summed in
/// index order so training is reproducible at any worker count.
const GRAD_CHUNK: usize = 16;

/// Held-out items start here so they never coincide with training draws.
const VALIDATION_OFFSET: u64 = 1 << 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Record the batch loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 6000,
            batch_size: 64,
            learning_rate: 1e-3,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    /// `(step, mean squared error of the batch)`.
    pub losses: Vec<(usize, f64)>,
}

/// One training or validation batch: clean images, timesteps, noise, labels.
pub struct NoisyBatch {
    pub x0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub y: Vec<usize>,
}

impl NoisyBatch {
    /// Draws timesteps and noise for dataset items `indices` from `rng`.
    pub fn draw(dataset: &SyntheticDataset, indices: &[u64], steps: usize, rng: &mut impl Rng) -> Self {
        let (x0, y) = dataset.gather(indices);
        let t = indices.iter().map(|_| rng.random_range(0..steps)).collect();
        let eps = Tensor::new(x0.shape().to_vec(), standard_normal(rng, x0.numel()))
            .expect("noise shape");
        NoisyBatch { x0, t, eps, y }
    }
}

/// `‖ε − ε_θ(x_t, t)‖²` summed over the batch.
pub fn diffusion_loss(
    model: &DiTModel,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    y: &[usize],
) -> Result<f64> {
    let xt = schedule.q_sample(x0, t, eps)?;
    let pred = model.forward(&xt, t, y)?;
    Ok(pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| (e - p) * (e - p))
        .sum())
}

/// Sum of squared errors over `rows` and the gradient for every parameter.
fn chunk_gradients(
    model: &DiTModel,
    xt: &Tensor,
    eps: &Tensor,
    t: &[usize],
    y: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut pass = model.forward_pass(xt, t, y, None, true)?;
    let target = pass.graph.constant(eps.clone());
    let diff = pass.graph.sub(pass.output, target)?;
    let loss = pass.graph.sum_squares(diff);
    let value = pass.graph.value(loss).item()?;
    let mut grads = pass.graph.backward(loss)?;
    let per_param = pass
        .params
        .iter()
        .zip(model.param_values())
        .map(|(&node, v)| grads.take(node).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok((value, per_param))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DiTModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_values().iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut DiTModel, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let p = model.param_mut(i).data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gj;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gj * gj;
                p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a fresh model on an endless stream of dataset items.
///
/// Returns the model with parameters rounded to single precision.
pub fn train_fp(
    config: &DiTConfig,
    schedule: &NoiseSchedule,
    dataset: &SyntheticDataset,
    options: &TrainOptions,
    seed: u64,
) -> Result<(DiTModel, TrainingLog)> {
    if options.batch_size == 0 || options.log_every == 0 {
        return Err(Error::Config("batch_size and log_every must be positive".into()));
    }
    if !(options.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    if schedule.len() != config.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but model.timesteps is {}",
            schedule.len(),
            config.timesteps
        )));
    }
    let mut model = DiTModel::new(config.clone(), seed)?;
    let mut adam = Adam::new(&model);
    let mut log = TrainingLog::default();
    let mut rng = item_rng(seed, 1);
    let bs = options.batch_size;
    let scale = 1.0 / (bs * config.image_numel()) as f64;
    for step in 0..options.steps {
        let indices: Vec<u64> = (0..bs as u64).map(|i| (step * bs) as u64 + i).collect();
        let batch = NoisyBatch::draw(dataset, &indices, config.timesteps, &mut rng);
        let xt = schedule.q_sample(&batch.x0, &batch.t, &batch.eps)?;
        let starts: Vec<usize> = (0..bs).step_by(GRAD_CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let len = GRAD_CHUNK.min(bs - s);
                chunk_gradients(
                    &model,
                    &xt.rows(s, len)?,
                    &batch.eps.rows(s, len)?,
                    &batch.t[s..s + len],
                    &batch.y[s..s + len],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let (mut loss, mut grads) = iter.next().expect("at least one chunk");
        for (l, g) in iter {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("batch loss is {loss}"),
            });
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        adam.update(&mut model, &grads, options.learning_rate);
        if step % options.log_every == 0 || step + 1 == options.steps {
            log.losses.push((step, loss));
        }
    }
    model.round_to_f32();
    Ok((model, log))
}

/// Mean squared noise-prediction error on `count` held-out items whose
/// timesteps and noise derive from `seed`.
pub fn validation_loss(
    model: &DiTModel,
    schedule: &NoiseSchedule,
    dataset: &SyntheticDataset,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = item_rng(seed, 2);
    let indices: Vec<u64> = (0..count as u64).map(|i| VALIDATION_OFFSET + i).collect();
    let b = NoisyBatch::draw(dataset, &indices, schedule.len(), &mut rng);
    let total = diffusion_loss(model, schedule, &b.x0, &b.t, &b.eps, &b.y)?;
    Ok(total / b.x0.numel().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DiTConfig {
        DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            num_classes: 4,
            timesteps: 20,
        }
    }

    #[test]
    fn diffusion_loss_matches_elementwise_oracle() {
        let c = tiny();
        let m = DiTModel::random(c.clone(), 3, 0.2).unwrap();
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let d = SyntheticDataset::for_model(1, &c).unwrap();
        let b = NoisyBatch::draw(&d, &[0, 1, 2], 20, &mut item_rng(5, 0));
        let got = diffusion_loss(&m, &s, &b.x0, &b.t, &b.eps, &b.y).unwrap();
        let xt = s.q_sample(&b.x0, &b.t, &b.eps).unwrap();
        let pred = m.forward(&xt, &b.t, &b.y).unwrap();
        let mut oracle = 0.0;
        for i in 0..pred.numel() {
            let d = b.eps.data()[i] - pred.data()[i];
            oracle += d * d;
        }
        assert!((got - oracle).abs() <= 1e-12 * oracle);
        let zero = DiTModel::new(c, 0).unwrap();
        let l0 = diffusion_loss(&zero, &s, &b.x0, &b.t, &b.eps, &b.y).unwrap();
        let norm: f64 = b.eps.data().iter().map(|e| e * e).sum();
        assert!((l0 - norm).abs() < 1e-12 * norm);
    }

    #[test]
    fn short_training_is_deterministic_and_reduces_loss() {
        let c = tiny();
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let d = SyntheticDataset::for_model(1, &c).unwrap();
        let opts = TrainOptions {
            steps: 40,
            batch_size: 20,
            learning_rate: 3e-3,
            log_every: 10,
        };
        let (a, log) = train_fp(&c, &s, &d, &opts, 11).unwrap();
        let (b, _) = train_fp(&c, &s, &d, &opts, 11).unwrap();
        assert_eq!(a.param_values(), b.param_values());
        let first = log.losses.first().unwrap().1;
        let last = log.losses.last().unwrap().1;
        assert!(last < first, "{first} -> {last}");
    }
}
