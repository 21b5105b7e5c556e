//! Calibration dataset construction, per-site statistics, and the
//! alternating quantizer search.

mod calibrate;
mod dataset;
mod objective;
mod search;
mod stats;

pub use calibrate::{
    calibrate, calibrate_site, site_objective, CalibrationOptions, CalibrationReport, SiteReport,
};
pub use dataset::{build_calib_dataset, CalibrationDataset, CalibrationMode, CalibrationSample};
pub use objective::{ho_objective, ObjectiveKind, SiteProblem, SiteSample};
pub use search::{
    channel_candidates, search_best, softmax_candidates, step_candidates, sweep_factors,
    uniform_candidates, CandidateScheme, CandidateSet,
};
pub use stats::{collect_layer_stats, LayerStats, SiteStats};
