use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::diffusion::{item_rng, sample_with, standard_normal, NoiseSchedule, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::NoisePredictor;
use crate::quant::{check_grouping, group_members, group_of};

/// Clean images for forward-corruption samples start at this dataset index.
const CALIBRATION_OFFSET: u64 = 1 << 50;

/// How noisy inputs for calibration are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Noise clean dataset images in closed form; the noise is the exact target.
    #[serde(alias = "forward")]
    ForwardCorruption,
    /// Snapshot full-precision reverse trajectories; the target is a fresh
    /// standard-normal draw.
    Trajectory,
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "forward-corruption" => Ok(CalibrationMode::ForwardCorruption),
            "trajectory" => Ok(CalibrationMode::Trajectory),
            other => Err(Error::Config(format!(
                "unknown calibration mode {other:?} (expected forward or trajectory)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSample {
    /// `[C, H, W]`.
    pub x_t: Tensor,
    pub t: usize,
    pub y: usize,
    pub eps: Tensor,
    /// 1-based timestep group.
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationDataset {
    /// Group-major: all samples of group 1, then group 2, ...
    pub samples: Vec<CalibrationSample>,
    pub groups: usize,
    pub per_group: usize,
    pub timesteps: usize,
    pub mode: CalibrationMode,
}

impl CalibrationDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestep_list(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Stacks samples `start..start + len` into `(x_t, t, y, eps)` batches.
    pub fn batch(&self, start: usize, len: usize) -> Result<(Tensor, Vec<usize>, Vec<usize>, Tensor)> {
        let part = &self.samples[start..start + len];
        let stack = |f: &dyn Fn(&CalibrationSample) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = part
                .iter()
                .map(|s| {
                    let mut shape = vec![1];
                    shape.extend_from_slice(f(s).shape());
                    f(s).clone().reshape(shape)
                })
                .collect::<Result<_>>()?;
            Tensor::concat_rows(&parts)
        };
        Ok((
            stack(&|s| &s.x_t)?,
            part.iter().map(|s| s.t).collect(),
            part.iter().map(|s| s.y).collect(),
            stack(&|s| &s.eps)?,
        ))
    }

    /// SHA-256 over every sample's inputs and target.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.mode as u8).to_le_bytes());
        for s in &self.samples {
            h.update((s.t as u64).to_le_bytes());
            h.update((s.y as u64).to_le_bytes());
            for v in s.x_t.data().iter().chain(s.eps.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Draws `per_group` samples from each of `groups` timestep groups.
pub fn build_calib_dataset(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    data: &SyntheticDataset,
    groups: usize,
    per_group: usize,
    mode: CalibrationMode,
    seed: u64,
) -> Result<CalibrationDataset> {
    let steps = schedule.len();
    check_grouping(steps, groups)?;
    if per_group == 0 {
        return Err(Error::Config("samples per group must be at least 1".into()));
    }
    if model.timesteps() != steps {
        return Err(Error::Config(format!(
            "model expects {} timesteps but schedule has {steps}",
            model.timesteps()
        )));
    }
    let mut rng = item_rng(seed, 3);
    let mut timesteps = Vec::with_capacity(groups * per_group);
    for g in 1..=groups {
        let members = group_members(g, steps, groups)?;
        for _ in 0..per_group {
            timesteps.push(rng.random_range(members.clone()));
        }
    }
    let samples = match mode {
        CalibrationMode::ForwardCorruption => {
            let indices: Vec<u64> = (0..timesteps.len() as u64).map(|i| CALIBRATION_OFFSET + i).collect();
            let (x0, labels) = data.gather(&indices);
            let eps = Tensor::new(x0.shape().to_vec(), standard_normal(&mut rng, x0.numel()))?;
            let xt = schedule.q_sample(&x0, &timesteps, &eps)?;
            (0..timesteps.len())
                .map(|i| {
                    Ok(CalibrationSample {
                        x_t: drop_lead(xt.rows(i, 1)?)?,
                        t: timesteps[i],
                        y: labels[i],
                        eps: drop_lead(eps.rows(i, 1)?)?,
                        group: group_of(timesteps[i], steps, groups)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        CalibrationMode::Trajectory => {
            // trajectory j supplies the j-th sample of every group
            let labels: Vec<usize> = (0..per_group).map(|j| data.label(j as u64)).collect();
            let shape = {
                let (img, _) = data.gather(&[0]);
                img.shape()[1..].to_vec()
            };
            let mut snaps: Vec<Option<Tensor>> = vec![None; timesteps.len()];
            sample_with(model, schedule, &shape, &labels, seed, &mut |t, x| {
                for (i, &ti) in timesteps.iter().enumerate() {
                    if ti == t {
                        snaps[i] = Some(drop_lead(x.rows(i % per_group, 1)?)?);
                    }
                }
                Ok(())
            })?;
            snaps
                .into_iter()
                .enumerate()
                .map(|(i, x_t)| {
                    let x_t = x_t.expect("every timestep is visited");
                    let eps = Tensor::new(x_t.shape().to_vec(), standard_normal(&mut rng, x_t.numel()))?;
                    Ok(CalibrationSample {
                        x_t,
                        t: timesteps[i],
                        y: labels[i % per_group],
                        eps,
                        group: group_of(timesteps[i], steps, groups)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(CalibrationDataset {
        samples,
        groups,
        per_group,
        timesteps: steps,
        mode,
    })
}

fn drop_lead(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(shape)
}
