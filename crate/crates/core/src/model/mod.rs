//! Diffusion transformer, its configuration, and the quantization-site registry.

mod config;
mod dit;
mod registry;

pub use config::{DiTConfig, MLP_RATIO};
pub use dit::{
    attention, patch_order, timestep_features, AttentionOutput, DiTModel, ForwardPass, Modulation,
    NoisePredictor, Operand, SiteHook, SiteNodes, LAYER_NORM_EPS,
};
pub use registry::{LayerTapRegistry, Site, SiteKind};
