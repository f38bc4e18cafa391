//! Image export, run manifests and the distilled-set directory layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/images/<class>/<slot>.fdrt
//! <out>/images/<class>/<slot>.ppm
//! <out>/traces/<job>.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, LabeledDataset, Normalization};
use crate::distill::{DistillConfig, DistilledImage, DistilledSet, Instrumentation, PatchBank, PatchProvenance};
use crate::error::{Error, Result};
use crate::metrics::EntropyTrace;
use crate::model::{Arch, Provenance, TrainedModel};
use crate::recovery::{PrecisionPolicy, TraceRow};
use crate::tensor::Tensor;

pub const TOOL_VERSION: &str = concat!("resmatch ", env!("CARGO_PKG_VERSION"));

/// De-normalizes, clamps to [0, 1] and quantizes a `[3, H, W]` image to P6
/// bytes (header included).
pub fn ppm_bytes(image: &Tensor, norm: &Normalization) -> Result<Vec<u8>> {
    let d = image.dims();
    let (c, h, w) = match *d {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::contract(format!("ppm export expects [3, H, W], got {d:?}"))),
    };
    if c != 3 || norm.channels() != 3 {
        return Err(Error::contract(format!("ppm export needs 3 channels, got {c}")));
    }
    let mut raw = image.to_vec();
    norm.denormalize(&mut raw, h * w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = raw[ch * h * w + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn export_ppm(image: &Tensor, norm: &Normalization, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ppm_bytes(image, norm)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary P6 image with maxval 255: `(width, height, rgb bytes)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                message: "truncated ppm header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected P6 magic, found `{}`", fields[0]),
        });
    }
    let num = |i: usize| {
        fields[i].parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad ppm header field `{}`", fields[i]),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format {
            offset: 0,
            message: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("raster needs {need} bytes after offset {pos}"),
        });
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| e.context(path.display().to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub path: PathBuf,
    pub digest: String,
    pub arch: Arch,
    pub provenance: Provenance,
}

impl TeacherRecord {
    pub fn new(path: impl Into<PathBuf>, model: &TrainedModel) -> Self {
        TeacherRecord {
            path: path.into(),
            digest: model.digest(),
            arch: model.spec.arch,
            provenance: model.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub digest: String,
    pub len: usize,
    pub normalization: Normalization,
}

impl DatasetRecord {
    pub fn new(ds: &LabeledDataset) -> Self {
        DatasetRecord {
            name: ds.name.clone(),
            digest: ds.digest(),
            len: ds.len(),
            normalization: ds.normalization.clone(),
        }
    }
}

/// Choices the method leaves open, echoed into every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionFlags {
    pub lambda: f32,
    pub scheduler_horizon: String,
    pub aggregation: String,
    pub precision: PrecisionPolicy,
    pub patch_selection: String,
    pub export_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub name: String,
    pub classes: Vec<usize>,
    pub instrumentation: Instrumentation,
    pub final_loss: Option<TraceRow>,
    pub precision_overflow_total: usize,
    pub entropy: EntropyTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub class: usize,
    pub slot: usize,
    pub fdrt: String,
    pub ppm: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub class: usize,
    pub slot: usize,
    pub provenance: PatchProvenance,
}

/// Everything needed to re-run a distillation with the same build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: DistillConfig,
    /// The flat config text, as `DistillConfig::serialize` writes it.
    pub config_text: String,
    pub teachers: Vec<TeacherRecord>,
    pub dataset: DatasetRecord,
    pub decisions: DecisionFlags,
    pub wall_time_secs: f64,
    pub jobs: Vec<JobSummary>,
    pub patches: Vec<PatchRecord>,
    pub images: Vec<ImageRecord>,
}

impl RunManifest {
    pub fn new(
        set: &DistilledSet,
        bank: &PatchBank,
        teachers: Vec<TeacherRecord>,
        dataset: DatasetRecord,
        wall_time_secs: f64,
    ) -> Self {
        let cfg = &set.config;
        RunManifest {
            tool_version: TOOL_VERSION.into(),
            config: cfg.clone(),
            config_text: cfg.serialize(),
            teachers,
            dataset,
            decisions: DecisionFlags {
                lambda: cfg.lambda,
                scheduler_horizon: cfg.scheduler.to_string(),
                aggregation: "mean".into(),
                precision: cfg.policy,
                patch_selection: bank.selection.clone(),
                export_resolution: cfg.d_orig,
            },
            wall_time_secs,
            jobs: set
                .jobs
                .iter()
                .map(|j| JobSummary {
                    name: j.name(),
                    classes: j.classes.clone(),
                    instrumentation: j.instrumentation.clone(),
                    final_loss: j.trace.rows.last().cloned(),
                    precision_overflow_total: j.trace.overflow_total(),
                    entropy: j.entropy.clone(),
                })
                .collect(),
            patches: bank
                .entries
                .iter()
                .map(|e| PatchRecord {
                    class: e.class,
                    slot: e.slot,
                    provenance: e.provenance.clone(),
                })
                .collect(),
            images: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes images, traces and `manifest.json` (with image records filled in).
pub fn write_distilled(dir: impl AsRef<Path>, set: &DistilledSet, manifest: &RunManifest) -> Result<RunManifest> {
    let dir = dir.as_ref();
    let norm = &manifest.dataset.normalization;
    let mut manifest = manifest.clone();
    manifest.images.clear();
    for img in &set.images {
        let fdrt = format!("images/{}/{}.fdrt", img.class, img.slot);
        let ppm = format!("images/{}/{}.ppm", img.class, img.slot);
        let bytes = img.image.to_fdrt_bytes();
        write_file(&dir.join(&fdrt), &bytes)?;
        write_file(&dir.join(&ppm), &ppm_bytes(&img.image, norm)?)?;
        manifest.images.push(ImageRecord {
            class: img.class,
            slot: img.slot,
            fdrt,
            ppm,
            sha256: sha256_hex(&bytes),
        });
    }
    for job in &set.jobs {
        write_file(&dir.join(format!("traces/{}.csv", job.name())), job.trace.to_csv().as_bytes())?;
    }
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Reads a distilled directory back: manifest plus images in manifest order.
pub fn load_distilled(dir: impl AsRef<Path>) -> Result<(RunManifest, Vec<DistilledImage>)> {
    let dir = dir.as_ref();
    let manifest = RunManifest::load(dir.join("manifest.json"))?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let image = Tensor::load(dir.join(&rec.fdrt))?;
        images.push(DistilledImage {
            class: rec.class,
            slot: rec.slot,
            image,
        });
    }
    Ok((manifest, images))
}
