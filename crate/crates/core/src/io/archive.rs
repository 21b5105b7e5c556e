use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_file;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;
pub const ARCHIVE_MANIFEST: &str = "samples.toml";
pub const ARCHIVE_PAYLOAD: &str = "samples.bin";
pub const PREVIEW_FILE: &str = "preview.pgm";

/// Header of a generated-sample archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub count: usize,
    /// Shape of one sample.
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub checkpoint_digest: String,
    /// Present when the samples come from a quantized model.
    pub sidecar_digest: Option<String>,
    pub payload: String,
    pub payload_bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleArchive {
    pub manifest: ArchiveManifest,
    /// `[count, ...shape]`.
    pub samples: Tensor,
}

/// Provenance of a sample set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSource<'a> {
    pub seed: u64,
    pub checkpoint_digest: &'a str,
    pub sidecar_digest: Option<&'a str>,
}

/// Grayscale mosaic of all samples as a binary PGM, averaging channels and
/// mapping `[−1, 1]` onto `0..=255`.
pub fn preview_pgm(samples: &Tensor) -> Result<Vec<u8>> {
    let s = samples.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Dimension(format!("preview needs [N, C, H, W] samples, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut pixels = vec![0u8; width * height];
    let data = samples.data();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = (0..c).map(|ch| data[((i * c + ch) * h + y) * w + x]).sum::<f64>() / c as f64;
                let byte = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                pixels[(oy + y) * width + ox + x] = byte;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

/// Writes samples as little-endian `f32` plus a manifest and a preview
/// image (omitted for an empty set). Returns the manifest digest.
pub fn save_archive(dir: &Path, samples: &Tensor, labels: &[usize], source: &SampleSource) -> Result<String> {
    let count = samples.shape().first().copied().unwrap_or(0);
    if labels.len() != count {
        return Err(Error::Dimension(format!("{} labels for {count} samples", labels.len())));
    }
    let payload: Vec<u8> = samples.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    let manifest = ArchiveManifest {
        format_version: ARCHIVE_VERSION,
        count,
        shape: samples.shape()[1..].to_vec(),
        labels: labels.to_vec(),
        seed: source.seed,
        checkpoint_digest: source.checkpoint_digest.into(),
        sidecar_digest: source.sidecar_digest.map(str::to_owned),
        payload: ARCHIVE_PAYLOAD.into(),
        payload_bytes: payload.len() as u64,
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let text = toml::to_string(&manifest).expect("archive manifest serializes");
    write_file(&dir.join(ARCHIVE_PAYLOAD), &payload)?;
    write_file(&dir.join(ARCHIVE_MANIFEST), text.as_bytes())?;
    if count > 0 {
        write_file(&dir.join(PREVIEW_FILE), &preview_pgm(samples)?)?;
    }
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn load_archive(dir: &Path) -> Result<SampleArchive> {
    let path = dir.join(ARCHIVE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ArchiveManifest =
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    let payload_path = dir.join(&manifest.payload);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if hex::encode(Sha256::digest(&payload)) != manifest.sha256 {
        return Err(Error::format(&payload_path, "payload digest mismatch"));
    }
    let mut shape = vec![manifest.count];
    shape.extend_from_slice(&manifest.shape);
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let samples = Tensor::new(shape, data).map_err(|e| Error::format(&payload_path, e.to_string()))?;
    if manifest.labels.len() != manifest.count {
        return Err(Error::format(&path, "label count differs from sample count"));
    }
    Ok(SampleArchive { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source() -> SampleSource<'static> {
        SampleSource {
            seed: 3,
            checkpoint_digest: "abc",
            sidecar_digest: None,
        }
    }

    #[test]
    fn archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f64 / 8.0 - 0.5).collect()).unwrap();
        save_archive(dir.path(), &x, &[0, 1, 2], &source()).unwrap();
        let a = load_archive(dir.path()).unwrap();
        assert_eq!(a.samples, x);
        assert_eq!(a.manifest.labels, vec![0, 1, 2]);
        assert!(dir.path().join(PREVIEW_FILE).exists());
    }

    #[test]
    fn empty_archive_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::zeros(&[0, 1, 4, 4]);
        save_archive(dir.path(), &x, &[], &source()).unwrap();
        let a = load_archive(dir.path()).unwrap();
        assert_eq!(a.manifest.count, 0);
        assert_eq!(a.samples.shape(), &[0, 1, 4, 4]);
    }

    #[test]
    fn preview_maps_range_to_bytes() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, 0.0, 3.0]).unwrap();
        let pgm = preview_pgm(&x).unwrap();
        let header = b"P5\n5 1\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 255, 0, 128, 255]);
    }
}
