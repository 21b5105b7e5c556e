use crate::diffusion::{sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{DiTModel, NoisePredictor};
use crate::quant::QuantizedModel;

/// Class label of trajectory `i` among `classes`.
pub fn trajectory_label(i: usize, classes: usize) -> usize {
    i % classes
}

/// Mean squared difference between the full-precision and quantized noise
/// predictions along full-precision reverse trajectories.
///
/// Entry `t` of the returned curve is the per-element mean over trajectories
/// at model timestep `t`, so the curve has one entry per timestep.
pub fn trajectory_divergence(
    fp: &DiTModel,
    quantized: &QuantizedModel,
    schedule: &NoiseSchedule,
    num_trajectories: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let config = fp.config();
    if quantized.model().config() != config {
        return Err(Error::Config("quantized model has a different shape".into()));
    }
    if schedule.len() != config.timesteps || quantized.timesteps() != config.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the models expect {}",
            schedule.len(),
            config.timesteps
        )));
    }
    let mut curve = vec![0.0; config.timesteps];
    if num_trajectories == 0 {
        return Ok(curve);
    }
    let labels: Vec<usize> = (0..num_trajectories)
        .map(|i| trajectory_label(i, config.num_classes))
        .collect();
    let mut observe = |t: usize, x: &crate::autodiff::Tensor| -> Result<()> {
        let ts = vec![t; num_trajectories];
        let a = fp.predict(x, &ts, &labels)?;
        let b = quantized.predict(x, &ts, &labels)?;
        let sq: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        curve[t] = sq / a.numel() as f64;
        Ok(())
    };
    sample_with(fp, schedule, &config.image_shape(), &labels, seed, &mut observe)?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiTConfig;

    fn tiny() -> (DiTModel, NoiseSchedule) {
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
        (
            DiTModel::random(c, 3, 0.2).unwrap(),
            NoiseSchedule::linear(10, 1e-4, 0.02).unwrap(),
        )
    }

    #[test]
    fn self_divergence_is_zero_with_length_t() {
        let (m, s) = tiny();
        let q = QuantizedModel::new(m.clone());
        let curve = trajectory_divergence(&m, &q, &s, 4, 1).unwrap();
        assert_eq!(curve.len(), 10);
        assert!(curve.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_mismatch_is_config_error() {
        let (m, _) = tiny();
        let q = QuantizedModel::new(m.clone());
        let s = NoiseSchedule::linear(12, 1e-4, 0.02).unwrap();
        assert!(matches!(
            trajectory_divergence(&m, &q, &s, 2, 1),
            Err(Error::Config(_))
        ));
    }
}
