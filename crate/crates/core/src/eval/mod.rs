//! Sample-quality proxies, quantized-vs-full-precision divergence, and the
//! ablation harness.

mod ablation;
mod divergence;
mod frechet;

pub use ablation::{
    generate, quantized_objective, reference_set, run_ablation, AblationConfig, AblationSettings,
    AblationTable, ConfigSummary, MetricReport, Verdict, FD_GAIN_TARGET, FP_LABEL,
    REFERENCE_OFFSET,
};
pub use divergence::{trajectory_divergence, trajectory_label};
pub use frechet::{
    frechet_distance, moments, toy_frechet, Projection, FRECHET_FEATURES, FRECHET_MIN_SAMPLES,
    FRECHET_REGULARIZATION,
};
