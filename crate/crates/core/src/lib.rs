//! Post-training quantization of a small diffusion transformer with
//! timestep-aware calibration.

pub mod autodiff;
pub mod calib;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod quant;

pub use error::{Error, Result};
