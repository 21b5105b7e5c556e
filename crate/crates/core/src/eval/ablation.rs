use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::divergence::{trajectory_divergence, trajectory_label};
use super::frechet::toy_frechet;
use crate::autodiff::Tensor;
use crate::calib::{
    build_calib_dataset, calibrate, collect_layer_stats, site_objective, CalibrationMode,
    CalibrationOptions, LayerStats, ObjectiveKind, SiteProblem,
};
use crate::diffusion::{sample, NoiseSchedule, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::DiTModel;
use crate::quant::{QuantizedModel, SiteQuantizer};

/// Dataset indices reserved for the toy-FD reference set.
pub const REFERENCE_OFFSET: u64 = 1 << 52;
/// Label of the full-precision reference row.
pub const FP_LABEL: &str = "fp";
/// Required relative toy-FD gain of the last configuration over the first.
pub const FD_GAIN_TARGET: f64 = 0.10;

/// One rung of the ablation ladder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub label: String,
    /// Fisher-weighted objective instead of plain output MSE.
    pub ho: bool,
    /// Two-region quantizers on post-softmax and post-GELU operands.
    pub mrq: bool,
    /// Per-timestep-group post-softmax quantizers.
    pub tgq: bool,
}

impl AblationConfig {
    pub fn new(label: &str, ho: bool, mrq: bool, tgq: bool) -> Self {
        AblationConfig {
            label: label.into(),
            ho,
            mrq,
            tgq,
        }
    }

    /// `baseline`, `+HO`, `+HO+MRQ`, `+HO+MRQ+TGQ`.
    pub fn ladder() -> Vec<AblationConfig> {
        vec![
            AblationConfig::new("baseline", false, false, false),
            AblationConfig::new("+HO", true, false, false),
            AblationConfig::new("+HO+MRQ", true, true, false),
            AblationConfig::new("+HO+MRQ+TGQ", true, true, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tgq && !self.mrq {
            return Err(Error::Config(format!(
                "ablation config {}: time grouping requires multi-region quantizers",
                self.label
            )));
        }
        if self.label == FP_LABEL {
            return Err(Error::Config(format!("label {FP_LABEL} is reserved")));
        }
        Ok(())
    }

    pub fn options(&self, base: &CalibrationOptions) -> CalibrationOptions {
        CalibrationOptions {
            objective: if self.ho {
                ObjectiveKind::Hessian
            } else {
                ObjectiveKind::Mse
            },
            multi_region: self.mrq,
            time_grouping: self.tgq,
            ..base.clone()
        }
    }
}

/// Settings shared by every configuration and seed of one ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    /// Bit widths, rounds, groups, and candidate count; the objective and
    /// quantizer flags are overridden per configuration.
    pub calibration: CalibrationOptions,
    pub samples_per_group: usize,
    pub mode: CalibrationMode,
    /// Generated samples per configuration for toy-FD.
    pub num_samples: usize,
    pub num_trajectories: usize,
    pub projection_seed: u64,
}

/// Metrics of one configuration under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub seed: u64,
    /// Toy-FD of generated samples against the dataset reference set.
    pub toy_fd: f64,
    /// Per-timestep quantized-vs-full-precision output MSE.
    pub divergence: Vec<f64>,
    pub mean_divergence: f64,
    /// Fisher-weighted objective of the final quantizers, averaged over sites.
    pub objective: f64,
    /// Mean objective the search itself minimized.
    pub search_objective: f64,
    /// Digest of the calibration dataset shared by the seed's configurations.
    pub calibration_digest: String,
    pub failure: Option<String>,
}

impl MetricReport {
    fn failed(label: &str, seed: u64, digest: &str, error: &Error) -> Self {
        MetricReport {
            label: label.into(),
            seed,
            toy_fd: 0.0,
            divergence: Vec::new(),
            mean_divergence: 0.0,
            objective: 0.0,
            search_objective: 0.0,
            calibration_digest: digest.into(),
            failure: Some(error.to_string()),
        }
    }
}

/// Means over the successful seeds of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub objective: f64,
    pub toy_fd: f64,
    pub mean_divergence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Mean objective non-increasing along the configuration order.
    pub ordering: bool,
    /// `1 − FD(last) / FD(first)`.
    pub fd_gain: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub seeds: Vec<u64>,
    /// Seed-major; within a seed the reference row comes first.
    pub rows: Vec<MetricReport>,
    /// Reference row first, then configurations in ladder order.
    pub summary: Vec<ConfigSummary>,
    pub verdict: Option<Verdict>,
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = values.fold((0.0, 0), |(s, n), v| (s + v, n + 1));
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

fn summarize(label: &str, rows: &[MetricReport]) -> ConfigSummary {
    let mine: Vec<&MetricReport> = rows.iter().filter(|r| r.label == label).collect();
    let ok: Vec<&&MetricReport> = mine.iter().filter(|r| r.failure.is_none()).collect();
    let (objective, runs) = mean(ok.iter().map(|r| r.objective));
    ConfigSummary {
        label: label.into(),
        runs,
        failures: mine.len() - runs,
        objective,
        toy_fd: mean(ok.iter().map(|r| r.toy_fd)).0,
        mean_divergence: mean(ok.iter().map(|r| r.mean_divergence)).0,
    }
}

fn verdict(configs: &[ConfigSummary]) -> Option<Verdict> {
    if configs.len() < 2 || configs.iter().any(|c| c.runs == 0) {
        return None;
    }
    let ordering = configs.windows(2).all(|w| w[1].objective <= w[0].objective);
    let (first, last) = (&configs[0], &configs[configs.len() - 1]);
    let fd_gain = if first.toy_fd > 0.0 {
        1.0 - last.toy_fd / first.toy_fd
    } else {
        0.0
    };
    Some(Verdict {
        ordering,
        fd_gain,
        holds: ordering && fd_gain >= FD_GAIN_TARGET,
    })
}

/// Reference images for toy-FD: `count` dataset draws outside the training range.
pub fn reference_set(dataset: &SyntheticDataset, count: usize) -> Tensor {
    let idx: Vec<u64> = (0..count as u64).map(|i| REFERENCE_OFFSET + i).collect();
    dataset.gather(&idx).0
}

/// Generates `count` class-cycled samples from `model` under `seed`.
pub fn generate(
    model: &dyn crate::model::NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    classes: usize,
    count: usize,
    seed: u64,
) -> Result<Tensor> {
    let labels: Vec<usize> = (0..count).map(|i| trajectory_label(i, classes)).collect();
    sample(model, schedule, shape, &labels, seed)
}

/// Fisher-weighted objective of the quantizers in `qm`, averaged over the
/// quantized sites.
pub fn quantized_objective(model: &DiTModel, stats: &LayerStats, qm: &QuantizedModel) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (i, q) in qm.assignments().iter().enumerate() {
        if *q == SiteQuantizer::FullPrecision {
            continue;
        }
        let problem = SiteProblem::from_stats(model, &stats.sites[i], i, &stats.timesteps)?;
        total += site_objective(&problem, q, ObjectiveKind::Hessian)?;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

struct Shared<'a> {
    model: &'a DiTModel,
    schedule: &'a NoiseSchedule,
    reference: &'a Tensor,
    settings: &'a AblationSettings,
}

impl Shared<'_> {
    fn evaluate(&self, label: &str, seed: u64, digest: &str, qm: &QuantizedModel) -> Result<MetricReport> {
        let c = self.model.config();
        let s = self.settings;
        let samples = generate(qm, self.schedule, &c.image_shape(), c.num_classes, s.num_samples, seed)?;
        let toy_fd = toy_frechet(&samples, self.reference, s.projection_seed)?;
        let divergence = trajectory_divergence(self.model, qm, self.schedule, s.num_trajectories, seed)?;
        let mean_divergence = mean(divergence.iter().copied()).0;
        Ok(MetricReport {
            label: label.into(),
            seed,
            toy_fd,
            divergence,
            mean_divergence,
            objective: 0.0,
            search_objective: 0.0,
            calibration_digest: digest.into(),
            failure: None,
        })
    }

    fn run_config(&self, config: &AblationConfig, seed: u64, digest: &str, stats: &LayerStats) -> Result<MetricReport> {
        config.validate()?;
        let options = config.options(&self.settings.calibration);
        let (qm, report) = calibrate(self.model, stats, &options)?;
        let mut row = self.evaluate(&config.label, seed, digest, &qm)?;
        row.objective = quantized_objective(self.model, stats, &qm)?;
        row.search_objective = report.mean_objective();
        Ok(row)
    }
}

/// Calibrates and evaluates every configuration under every seed.
///
/// Seed `s` fixes the calibration dataset shared by all configurations and
/// the noise of every generated sample and trajectory. A configuration that
/// fails is recorded as failed without stopping the others.
pub fn run_ablation(
    model: &DiTModel,
    schedule: &NoiseSchedule,
    dataset: &SyntheticDataset,
    configs: &[AblationConfig],
    seeds: &[u64],
    settings: &AblationSettings,
) -> Result<AblationTable> {
    settings.calibration.validate()?;
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one config and one seed".into()));
    }
    let reference = reference_set(dataset, settings.num_samples);
    let shared = Shared {
        model,
        schedule,
        reference: &reference,
        settings,
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        let calib = build_calib_dataset(
            model,
            schedule,
            dataset,
            settings.calibration.groups,
            settings.samples_per_group,
            settings.mode,
            seed,
        )?;
        let digest = calib.digest();
        let stats = collect_layer_stats(model, &calib)?;
        rows.push(shared.evaluate(FP_LABEL, seed, &digest, &QuantizedModel::new(model.clone()))?);
        let results: Vec<MetricReport> = configs
            .par_iter()
            .map(|cfg| {
                shared
                    .run_config(cfg, seed, &digest, &stats)
                    .unwrap_or_else(|e| MetricReport::failed(&cfg.label, seed, &digest, &e))
            })
            .collect();
        rows.extend(results);
    }
    let mut summary = vec![summarize(FP_LABEL, &rows)];
    let configs_summary: Vec<ConfigSummary> = configs.iter().map(|cfg| summarize(&cfg.label, &rows)).collect();
    let verdict = verdict(&configs_summary);
    summary.extend(configs_summary);
    Ok(AblationTable {
        weight_bits: settings.calibration.weight_bits,
        act_bits: settings.calibration.act_bits,
        seeds: seeds.to_vec(),
        rows,
        summary,
        verdict,
    })
}

impl AblationTable {
    pub fn summary_of(&self, label: &str) -> Option<&ConfigSummary> {
        self.summary.iter().find(|s| s.label == label)
    }

    pub fn verdict_line(&self) -> String {
        match &self.verdict {
            None => "verdict: undetermined (missing configurations)".into(),
            Some(v) => format!(
                "verdict: ordering {}; toy-FD gain {:.1}% (target {:.0}%); {}",
                if v.ordering { "holds" } else { "violated" },
                100.0 * v.fd_gain,
                100.0 * FD_GAIN_TARGET,
                if v.holds { "PASS" } else { "FAIL" }
            ),
        }
    }

    /// Per-seed rows as comma-separated values with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,seed,objective,search_objective,toy_fd,mean_divergence,status\n");
        for r in &self.rows {
            let status = match &r.failure {
                None => "ok".to_string(),
                Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{}",
                r.label, r.seed, r.objective, r.search_objective, r.toy_fd, r.mean_divergence, status
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("ablation W{}A{} seeds {:?}\n", self.weight_bits, self.act_bits, self.seeds);
        let _ = writeln!(out, "{:<14} {:>6} {:>14} {:>14} {:>14}", "config", "seed", "objective", "toy_fd", "divergence");
        for r in &self.rows {
            match &r.failure {
                None => {
                    let _ = writeln!(
                        out,
                        "{:<14} {:>6} {:>14.6e} {:>14.6e} {:>14.6e}",
                        r.label, r.seed, r.objective, r.toy_fd, r.mean_divergence
                    );
                }
                Some(e) => {
                    let _ = writeln!(out, "{:<14} {:>6} failed: {e}", r.label, r.seed);
                }
            }
        }
        let _ = writeln!(out, "mean over seeds:");
        let _ = writeln!(out, "{:<14} {:>6} {:>14} {:>14} {:>14}", "config", "runs", "objective", "toy_fd", "divergence");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>14.6e} {:>14.6e} {:>14.6e}",
                s.label, s.runs, s.objective, s.toy_fd, s.mean_divergence
            );
        }
        out.push_str(&self.verdict_line());
        out.push('\n');
        out
    }
}
