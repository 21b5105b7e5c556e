use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationMode, CalibrationOptions, ObjectiveKind};
use crate::diffusion::{NoiseSchedule, SyntheticDataset, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::AblationSettings;
use crate::model::DiTConfig;
use crate::quant::check_grouping;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub groups: usize,
    pub samples_per_group: usize,
    pub mode: CalibrationMode,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub rounds: usize,
    /// Trial values per parameter sweep.
    pub candidates: usize,
    pub objective: ObjectiveKind,
    pub multi_region: bool,
    pub time_grouping: bool,
    pub per_channel_weights: bool,
    pub quantize_final_linear: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let o = CalibrationOptions::default();
        CalibrationConfig {
            groups: o.groups,
            samples_per_group: 32,
            mode: CalibrationMode::ForwardCorruption,
            weight_bits: o.weight_bits,
            act_bits: o.act_bits,
            rounds: o.rounds,
            candidates: o.candidates,
            objective: o.objective,
            multi_region: o.multi_region,
            time_grouping: o.time_grouping,
            per_channel_weights: o.per_channel_weights,
            quantize_final_linear: o.quantize_final_linear,
        }
    }
}

impl CalibrationConfig {
    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions {
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            rounds: self.rounds,
            groups: self.groups,
            objective: self.objective,
            multi_region: self.multi_region,
            time_grouping: self.time_grouping,
            per_channel_weights: self.per_channel_weights,
            quantize_final_linear: self.quantize_final_linear,
            candidates: self.candidates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// Generated samples per configuration for toy-FD.
    pub num_samples: usize,
    pub num_trajectories: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: vec![0, 1, 2, 3, 4],
            num_samples: 128,
            num_trajectories: 10,
        }
    }
}

/// Every source of randomness in a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub dataset: u64,
    pub training: u64,
    pub calibration: u64,
    pub sampling: u64,
    pub projection: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Complete description of a run. Timesteps `T` are `model.timesteps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: DiTConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub ablation: AblationSection,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        let c = &self.calibration;
        check_grouping(self.model.timesteps, c.groups).map_err(|_| {
            Error::Config(format!(
                "calibration.groups {} does not divide model.timesteps {}",
                c.groups, self.model.timesteps
            ))
        })?;
        if c.samples_per_group == 0 {
            return Err(Error::Config("calibration.samples_per_group must be positive".into()));
        }
        c.options().validate()?;
        if self.train.steps == 0 || self.train.batch_size == 0 || self.train.log_every == 0 {
            return Err(Error::Config(
                "train.steps, train.batch_size and train.log_every must be positive".into(),
            ));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.model.timesteps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        SyntheticDataset::for_model(self.seeds.dataset, &self.model)
    }

    pub fn ablation_settings(&self) -> AblationSettings {
        AblationSettings {
            calibration: self.calibration.options(),
            samples_per_group: self.calibration.samples_per_group,
            mode: self.calibration.mode,
            num_samples: self.ablation.num_samples,
            num_trajectories: self.ablation.num_trajectories,
            projection_seed: self.seeds.projection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[seeds]\ndataset = 1\ntraining = 2\ncalibration = 3\nsampling = 4\nprojection = 5\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.model, DiTConfig::default());
        assert_eq!(c.calibration.groups, 10);
        assert_eq!(c.seeds.sampling, 4);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}[calibration]\ngroupz = 10\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("groupz"), "{err}");
    }

    #[test]
    fn seeds_are_mandatory() {
        assert!(RunConfig::parse("[model]\nimage_size = 16\n").is_err());
    }

    #[test]
    fn indivisible_groups_rejected() {
        let text = format!("{MINIMAL}[calibration]\ngroups = 7\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("groups 7"), "{err}");
    }

    #[test]
    fn bit_widths_limited() {
        for bad in ["weight_bits = 9", "act_bits = 1"] {
            let text = format!("{MINIMAL}[calibration]\n{bad}\n");
            assert!(RunConfig::parse(&text).is_err());
        }
    }
}
