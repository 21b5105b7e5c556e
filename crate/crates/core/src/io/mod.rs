//! Run configuration, checkpoints, quantization sidecars, and sample archives.

mod archive;
mod checkpoint;
mod config;
mod sidecar;

use std::fs;
use std::path::Path;

pub use archive::{
    load_archive, preview_pgm, save_archive, ArchiveManifest, SampleArchive, SampleSource,
    ARCHIVE_MANIFEST, ARCHIVE_PAYLOAD, PREVIEW_FILE,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_VERSION, MANIFEST_FILE, PAYLOAD_FILE, TENSOR_DTYPE,
};
pub use config::{
    AblationSection, CalibrationConfig, OutputConfig, RunConfig, ScheduleConfig, SeedConfig,
};
pub use sidecar::{QuantSidecar, SiteRecord, SIDECAR_VERSION};

use crate::error::{Error, Result};

/// Writes `bytes` to `path`, creating missing parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
