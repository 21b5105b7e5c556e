use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::write_file;
use crate::calib::{CalibrationDataset, CalibrationMode, CalibrationOptions, CalibrationReport};
use crate::error::{Error, Result};
use crate::model::SiteKind;
use crate::quant::{QuantizedModel, SiteQuantizer};

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRecord {
    pub site: String,
    pub kind: SiteKind,
    pub quantizer: SiteQuantizer,
    pub objective_init: f64,
    pub objective_final: f64,
    pub trace: Vec<f64>,
}

/// Calibrated quantizer parameters for every registry site, bound to the
/// checkpoint and calibration data that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSidecar {
    pub format_version: u32,
    pub checkpoint_digest: String,
    pub dataset_digest: String,
    pub mode: CalibrationMode,
    pub samples_per_group: usize,
    pub calibration_seed: u64,
    pub options: CalibrationOptions,
    pub sites: Vec<SiteRecord>,
    /// SHA-256 of this document serialized with an empty `digest`.
    pub digest: String,
}

impl QuantSidecar {
    pub fn new(
        checkpoint_digest: &str,
        dataset: &CalibrationDataset,
        calibration_seed: u64,
        report: &CalibrationReport,
    ) -> Self {
        let mut s = QuantSidecar {
            format_version: SIDECAR_VERSION,
            checkpoint_digest: checkpoint_digest.into(),
            dataset_digest: dataset.digest(),
            mode: dataset.mode,
            samples_per_group: dataset.per_group,
            calibration_seed,
            options: report.options.clone(),
            sites: report
                .sites
                .iter()
                .map(|r| SiteRecord {
                    site: r.id.clone(),
                    kind: r.kind,
                    quantizer: r.quantizer.clone(),
                    objective_init: r.objective_init,
                    objective_final: r.objective_final,
                    trace: r.trace.clone(),
                })
                .collect(),
            digest: String::new(),
        };
        s.digest = s.body_digest();
        s
    }

    fn body_digest(&self) -> String {
        let body = QuantSidecar {
            digest: String::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(body.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        text.push('\n');
        text
    }

    /// Parses a sidecar and verifies its self-digest.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let s: QuantSidecar =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if s.format_version != SIDECAR_VERSION {
            return Err(Error::format(path, format!("unsupported format version {}", s.format_version)));
        }
        if s.body_digest() != s.digest {
            return Err(Error::format(path, "sidecar digest mismatch"));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Quantized model with every recorded quantizer assigned; sites recorded
    /// at full precision stay untouched.
    pub fn apply(&self, checkpoint: &Checkpoint) -> Result<QuantizedModel> {
        if checkpoint.digest != self.checkpoint_digest {
            return Err(Error::Config(format!(
                "sidecar was calibrated on checkpoint {} but {} was supplied",
                self.checkpoint_digest, checkpoint.digest
            )));
        }
        let registry = checkpoint.model.registry();
        if registry.len() != self.sites.len() {
            return Err(Error::Config(format!(
                "sidecar covers {} sites, model has {}",
                self.sites.len(),
                registry.len()
            )));
        }
        let mut qm = QuantizedModel::new(checkpoint.model.clone());
        for (i, (site, rec)) in registry.sites().iter().zip(&self.sites).enumerate() {
            if site.id != rec.site || site.kind != rec.kind {
                return Err(Error::Config(format!(
                    "sidecar record {} ({}) does not match site {} ({})",
                    rec.site, rec.kind, site.id, site.kind
                )));
            }
            if rec.quantizer != SiteQuantizer::FullPrecision {
                qm.assign(i, rec.quantizer.clone())?;
            }
        }
        Ok(qm)
    }
}
