//! Fake-quantization arithmetic and the quantized model wrapper.

mod grouped;
mod model;
mod multi_region;
mod site;
mod uniform;

pub use grouped::{check_grouping, group_members, group_of, TimeGroupedParams};
pub use model::QuantizedModel;
pub use multi_region::{
    init_gelu, init_softmax, snap_softmax_step, softmax_coarse_step, MultiRegionParams, RegionKind,
    SOFTMAX_TOLERANCE,
};
pub use site::{ActQuant, Quantizer, SiteQuantizer, WeightQuant};
pub use uniform::{init_minmax, MinMaxInit, QuantParams, DEGENERATE_STEP, MAX_BITS, MIN_BITS};
