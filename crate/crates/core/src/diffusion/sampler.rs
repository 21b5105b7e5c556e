use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::NoisePredictor;

/// Random stream for item `index` under `seed`; streams never overlap.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_schedule(model: &dyn NoisePredictor, schedule: &NoiseSchedule) -> Result<()> {
    if model.timesteps() != schedule.len() {
        return Err(Error::Config(format!(
            "model expects {} timesteps but schedule has {}",
            model.timesteps(),
            schedule.len()
        )));
    }
    Ok(())
}

/// One ancestral step from diffusion step `step` (1-based) to `step − 1`.
///
/// `x_{step−1} = μ_θ(x_step) + σ·z`; at `step == 1` the noise term is
/// dropped so the last step is deterministic.
pub fn p_sample_step(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x: &Tensor,
    step: usize,
    y: &[usize],
    z: &Tensor,
) -> Result<Tensor> {
    check_schedule(model, schedule)?;
    if step == 0 || step > schedule.len() {
        return Err(Error::Domain(format!(
            "reverse step {step} outside 1..={}",
            schedule.len()
        )));
    }
    let batch = x.shape().first().copied().unwrap_or(0);
    let eps = model.predict(x, &vec![step - 1; batch], y)?;
    let mut mean = schedule.posterior_mean(x, &eps, step)?;
    if step > 1 {
        if z.shape() != x.shape() {
            return Err(Error::Dimension("noise draw shape differs from x_t".into()));
        }
        let sigma = schedule.sigma(step - 1);
        for (m, zv) in mean.data_mut().iter_mut().zip(z.data()) {
            *m += sigma * zv;
        }
    }
    Ok(mean)
}

/// Full reverse trajectory from pure noise, calling `observe(t, x_t)` with
/// the model timestep before each of the `T` model evaluations.
///
/// Trajectory `i` draws all of its noise from `item_rng(seed, i)`, so a
/// trajectory does not depend on the other members of the batch.
pub fn sample_with(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    labels: &[usize],
    seed: u64,
    observe: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    check_schedule(model, schedule)?;
    let batch = labels.len();
    let per: usize = shape.iter().product();
    let mut full_shape = vec![batch];
    full_shape.extend_from_slice(shape);
    let mut rngs: Vec<ChaCha8Rng> = (0..batch as u64).map(|i| item_rng(seed, i)).collect();
    let init = rngs.iter_mut().flat_map(|r| standard_normal(r, per)).collect();
    let mut x = Tensor::new(full_shape.clone(), init)?;
    if batch == 0 {
        return Ok(x);
    }
    for step in (1..=schedule.len()).rev() {
        observe(step - 1, &x)?;
        let z = if step > 1 {
            let data = rngs.iter_mut().flat_map(|r| standard_normal(r, per)).collect();
            Tensor::new(full_shape.clone(), data)?
        } else {
            Tensor::zeros(&full_shape)
        };
        x = p_sample_step(model, schedule, &x, step, labels, &z)?;
        if !x.is_finite() {
            return Err(Error::Domain(format!("trajectory became non-finite at step {step}")));
        }
    }
    Ok(x)
}

pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    labels: &[usize],
    seed: u64,
) -> Result<Tensor> {
    sample_with(model, schedule, shape, labels, seed, &mut |_, _| Ok(()))
}
