//! Labeled image datasets: the built-in synthetic shapes generator, the CIFAR
//! binary format, per-channel normalization and training augmentations.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::resample;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std` of [0, 1] pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation per channel of raw `[N, C, H, W]` pixels.
    pub fn fit(raw: &[f32], channels: usize, plane: usize) -> Self {
        let mut mean = vec![0.0f32; channels];
        let mut std = vec![1.0f32; channels];
        for c in 0..channels {
            let values = raw
                .chunks_exact(plane)
                .skip(c)
                .step_by(channels)
                .flatten()
                .map(|&v| v as f64);
            let (mut n, mut s, mut sq) = (0.0f64, 0.0f64, 0.0f64);
            for v in values {
                n += 1.0;
                s += v;
                sq += v * v;
            }
            if n > 0.0 {
                let m = s / n;
                mean[c] = m as f32;
                let var = (sq / n - m * m).max(0.0);
                std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
            }
        }
        Normalization { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &mut [f32], plane: usize) {
        let c = self.channels();
        for (i, chunk) in raw.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn denormalize(&self, data: &mut [f32], plane: usize) {
        let c = self.channels();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = *v * s + m;
            }
        }
    }

    /// Clamps normalized values to the image of raw `[0, 1]`, channel-cyclic.
    pub fn clamp_normalized(&self, data: &mut [f32], plane: usize) {
        let c = self.channels();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let (lo, hi) = (self.normalized(i % c, 0.0), self.normalized(i % c, 1.0));
            for v in chunk {
                *v = v.clamp(lo.min(hi), lo.max(hi));
            }
        }
    }

    /// Normalized value of a raw pixel `raw` in channel `c`.
    pub fn normalized(&self, c: usize, raw: f32) -> f32 {
        (raw - self.mean[c]) / self.std[c]
    }
}

/// Images normalized per channel plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
    /// CIFAR-100 coarse labels, kept so a batch file can be written back.
    pub coarse_labels: Option<Vec<u8>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    num_classes: usize,
    split: Split,
    normalization: Normalization,
    dims: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        let dims = images.dims();
        if dims.len() != 4 {
            return Err(Error::Data(format!("dataset images must be [N,C,H,W], got {dims:?}")));
        }
        if dims[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                dims[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        if normalization.channels() != dims[1] {
            return Err(Error::Data("normalization channel count mismatch".into()));
        }
        Ok(LabeledDataset {
            name: name.into(),
            images,
            labels,
            num_classes,
            split,
            normalization,
            coarse_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let data = match self.images.storage() {
            crate::tensor::Storage::Full32(v) => v,
            crate::tensor::Storage::Half16(_) => panic!("dataset images are stored full32"),
        };
        &data[index * per..(index + 1) * per]
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch dims")
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Re-expresses the images under a different normalization (for example a
    /// test split adopting the training split's constants).
    pub fn renormalize(&mut self, target: &Normalization) {
        let (_, h, w) = self.image_dims();
        let mut data = self.images.to_vec();
        self.normalization.denormalize(&mut data, h * w);
        target.normalize(&mut data, h * w);
        self.images = Tensor::new(self.images.dims().to_vec(), data).expect("same dims");
        self.normalization = target.clone();
    }

    /// SHA-256 over labels, dims and image bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.images.to_fdrt_bytes());
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DatasetMeta {
            name: self.name.clone(),
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
            dims: self.images.dims().to_vec(),
        };
        let path = dir.join("dataset.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        self.images.save(dir.join("images.fdrt"))?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect())?;
        labels.save(dir.join("labels.fdrt"))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        let images = Tensor::load(dir.join("images.fdrt"))?;
        if images.dims() != meta.dims {
            return Err(Error::Data(format!("{}: image dims disagree with dataset.json", dir.display())));
        }
        let labels = Tensor::load(dir.join("labels.fdrt"))?
            .values()
            .iter()
            .map(|&v| v as usize)
            .collect();
        LabeledDataset::new(meta.name, images, labels, meta.num_classes, meta.split, meta.normalization)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// CIFAR binary format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::Config(format!("unknown CIFAR variant `{other}`"))),
        }
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses a CIFAR binary batch. Pixels are scaled to [0, 1] and normalized
/// with constants fitted on this file; CIFAR-100 uses the fine label.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<LabeledDataset> {
    let stride = variant.record_len();
    if !bytes.len().is_multiple_of(stride) {
        let offset = bytes.len() - bytes.len() % stride;
        return Err(Error::Format {
            offset: offset as u64,
            message: format!(
                "incomplete record: {} of {stride} bytes present (file length {})",
                bytes.len() - offset,
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / stride;
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let mut raw = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(stride).enumerate() {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format {
                offset: (i * stride + variant.label_bytes() - 1) as u64,
                message: format!("label {label} out of range"),
            });
        }
        if variant == CifarVariant::Cifar100 {
            coarse.push(rec[0]);
        }
        labels.push(label);
        raw.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let norm = Normalization::fit(&raw, 3, plane);
    norm.normalize(&mut raw, plane);
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], raw)?;
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    let mut ds = LabeledDataset::new(name, images, labels, variant.num_classes(), split, norm)?;
    if variant == CifarVariant::Cifar100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = if path
        .file_name()
        .and_then(|f| f.to_str())
        .is_some_and(|f| f.contains("test"))
    {
        Split::Test
    } else {
        Split::Train
    };
    parse_cifar(&bytes, variant, split).map_err(|e| e.context(path.display().to_string()))
}

/// Encodes a dataset back into CIFAR records (de-normalized, quantized to 8 bits).
pub fn encode_cifar(ds: &LabeledDataset, variant: CifarVariant) -> Result<Vec<u8>> {
    let (c, h, w) = ds.image_dims();
    if (c, h, w) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Data(format!("CIFAR records are 3x32x32, dataset is {c}x{h}x{w}")));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == CifarVariant::Cifar100 {
            let coarse = ds.coarse_labels.as_ref().map_or(0, |v| v[i]);
            out.push(coarse);
        }
        out.push(ds.labels[i] as u8);
        let mut px = ds.image(i).to_vec();
        ds.normalization.denormalize(&mut px, h * w);
        out.extend(px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic shapes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            per_class: 200,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
];

// Base RGB of each colour family.
const HUES: [[f32; 3]; 6] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.45, 0.9],
    [0.25, 0.8, 0.3],
    [0.9, 0.8, 0.2],
    [0.75, 0.3, 0.8],
    [0.2, 0.8, 0.8],
];

impl Shape {
    /// Whether the point `(u, v)`, expressed in the shape's rotated unit frame
    /// (radius 1), lies inside the shape.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-0.9..=0.7).contains(&v) && u.abs() <= (0.7 - v) * 0.6,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

fn class_layout(num_classes: usize) -> Result<usize> {
    let shapes = if num_classes <= 4 * HUES.len() { 4 } else { SHAPES.len() };
    if num_classes == 0 || num_classes > shapes * HUES.len() {
        return Err(Error::Data(format!(
            "synthetic shapes support 1..={} classes, got {num_classes}",
            SHAPES.len() * HUES.len()
        )));
    }
    Ok(shapes)
}

fn render(class: usize, shapes: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let shape = SHAPES[class % shapes];
    let hue = HUES[class / shapes];
    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    let s = size as f32;

    // Background: a random linear gradient between two muted colours.
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.75));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.75));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / s - 0.5) * ga + (y as f32 / s - 0.5) * gb + 0.75) / 1.5;
            for c in 0..3 {
                img[c * plane + y * size + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    // Clutter: small grey-ish rectangles.
    for _ in 0..rng.gen_range(2..5) {
        let w = rng.gen_range(2..=size / 5);
        let h = rng.gen_range(2..=size / 5);
        let x0 = rng.gen_range(0..size - w);
        let y0 = rng.gen_range(0..size - h);
        let g: f32 = rng.gen_range(0.0..1.0);
        let tint: [f32; 3] = std::array::from_fn(|_| g + rng.gen_range(-0.1..0.1));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    img[c * plane + y * size + x] = tint[c];
                }
            }
        }
    }

    // Foreground shape.
    let radius = s * rng.gen_range(0.24..0.36);
    let cx = rng.gen_range(radius..s - radius);
    let cy = rng.gen_range(radius..s - radius);
    let rot: f32 = rng.gen_range(-0.3..0.3);
    let (rc, rs) = (rot.cos(), rot.sin());
    let bright: f32 = rng.gen_range(0.75..1.15);
    let color: [f32; 3] = std::array::from_fn(|c| hue[c] * bright + rng.gen_range(-0.08..0.08));
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 + 0.5 - cx) / radius;
            let dy = (y as f32 + 0.5 - cy) / radius;
            let u = rc * dx + rs * dy;
            let v = -rs * dx + rc * dy;
            if shape.contains(u, v) {
                for c in 0..3 {
                    img[c * plane + y * size + x] = color[c];
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    img
}

/// Procedurally drawn shapes: class = (shape, colour family), with gradient
/// background, clutter and pixel noise. Returns `(train, test)` split 80/20
/// per class; normalization is fitted on the training split.
pub fn gen_synthetic(seed: u64, spec: SyntheticSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.size < 16 {
        return Err(Error::Data(format!("synthetic image size must be >= 16, got {}", spec.size)));
    }
    if spec.per_class < 2 {
        return Err(Error::Data("synthetic per_class must be >= 2".into()));
    }
    let shapes = class_layout(spec.num_classes)?;
    let plane = spec.size * spec.size;
    let per = 3 * plane;
    let n_train = (spec.per_class * 4).div_ceil(5).min(spec.per_class - 1);

    let mut train_raw = Vec::new();
    let mut test_raw = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    for class in 0..spec.num_classes {
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut rng::stream(seed, &[0x5e1, class as u64]));
        let mut in_train = vec![false; spec.per_class];
        for &i in &order[..n_train] {
            in_train[i] = true;
        }
        for (i, &train) in in_train.iter().enumerate() {
            let mut r = rng::stream(seed, &[class as u64, i as u64]);
            let img = render(class, shapes, spec.size, &mut r);
            debug_assert_eq!(img.len(), per);
            if train {
                train_raw.extend_from_slice(&img);
                train_labels.push(class);
            } else {
                test_raw.extend_from_slice(&img);
                test_labels.push(class);
            }
        }
    }
    let norm = Normalization::fit(&train_raw, 3, plane);
    norm.normalize(&mut train_raw, plane);
    norm.normalize(&mut test_raw, plane);
    let name = format!("shapes-{}c-{}px-seed{seed}", spec.num_classes, spec.size);
    let train = LabeledDataset::new(
        name.clone(),
        Tensor::new(vec![train_labels.len(), 3, spec.size, spec.size], train_raw)?,
        train_labels,
        spec.num_classes,
        Split::Train,
        norm.clone(),
    )?;
    let test = LabeledDataset::new(
        name,
        Tensor::new(vec![test_labels.len(), 3, spec.size, spec.size], test_raw)?,
        test_labels,
        spec.num_classes,
        Split::Test,
        norm,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Augmentation

/// Random crop from a zero-padded copy (zero is the per-channel mean after
/// normalization) followed by a random horizontal flip, per sample.
pub fn random_crop_flip(batch: &Tensor, pad: usize, rng: &mut Rng) -> Tensor {
    let d = batch.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let src = batch.values();
    let mut out = vec![0.0f32; src.len()];
    for s in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(d.to_vec(), out).expect("same dims")
}

/// A square crop box `(top, left, side)` covering `scale` of the area.
pub fn random_square_box(h: usize, w: usize, scale: (f32, f32), rng: &mut Rng) -> (usize, usize, usize) {
    let area = (h * w) as f32 * rng.gen_range(scale.0..=scale.1);
    let side = (area.sqrt().round() as usize).clamp(1, h.min(w));
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    (top, left, side)
}

/// Copies out a crop box of a `[C, H, W]` image as `[1, C, side, side]`.
pub fn crop(image: &[f32], c: usize, h: usize, w: usize, bx: (usize, usize, usize)) -> Tensor {
    let (top, left, side) = bx;
    debug_assert!(top + side <= h && left + side <= w);
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in top..top + side {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&image[row + left..row + left + side]);
        }
    }
    Tensor::new(vec![1, c, side, side], out).expect("crop dims")
}

/// Random-resized-crop (square, area fraction in `scale`) plus horizontal
/// flip, applied per sample; output keeps the input resolution.
pub fn random_resized_crop_flip(batch: &Tensor, scale: (f32, f32), rng: &mut Rng) -> Result<Tensor> {
    let d = batch.dims().to_vec();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let src = batch.values();
    let mut out = Vec::with_capacity(src.len());
    for s in 0..n {
        let img = &src[s * c * h * w..(s + 1) * c * h * w];
        let bx = random_square_box(h, w, scale, rng);
        let patch = resample::resample(&crop(img, c, h, w, bx), (h, w))?;
        let mut v = patch.to_vec();
        if rng.gen_bool(0.5) {
            for row in v.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        out.extend_from_slice(&v);
    }
    Tensor::new(d, out)
}
