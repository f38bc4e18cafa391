//! Residual-matching distillation: patch initialization, budget partitioning,
//! resolution toggling, residual merges and the final residual-free stage.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, BnMode};
use crate::data::{self, CifarVariant, LabeledDataset, Normalization, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, EntropyCheckpoint, EntropyTrace};
use crate::model::{cosine_factor, TrainedModel};
use crate::recovery::{grad_step, AdamHyper, AdamState, LossTrace, PrecisionPolicy, RecoveryObjective};
use crate::resample::{resample, ResamplePlan};
use crate::rng;
use crate::tensor::{Precision, Tensor};

const PATCH_STREAM: u64 = 0x7a7c;
const AUGMENT_STREAM: u64 = 0xa06e;
pub const ENTROPY_BINS: usize = 256;

/// Learning-rate schedule over the recovery steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    /// Cosine annealing over the whole budget.
    #[default]
    CosineGlobal,
    /// Cosine annealing restarted at every stage.
    CosineStage,
    Constant,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::CosineGlobal => "cosine-global",
            Scheduler::CosineStage => "cosine-stage",
            Scheduler::Constant => "constant",
        })
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-global" => Ok(Scheduler::CosineGlobal),
            "cosine-stage" => Ok(Scheduler::CosineStage),
            "constant" => Ok(Scheduler::Constant),
            _ => Err(Error::Config(format!("unknown scheduler `{s}`"))),
        }
    }
}

/// Where the real images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetSource {
    /// The built-in procedural generator (training split).
    Shapes { seed: u64, spec: SyntheticSpec },
    /// A directory written by `LabeledDataset::save_dir`.
    Dir { path: PathBuf },
    Cifar { variant: CifarVariant, path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Shapes {
            seed: 0,
            spec: SyntheticSpec::default(),
        }
    }
}

impl DatasetSource {
    /// Parses `shapes`, `dir:<path>`, `cifar10:<file>` or `cifar100:<file>`.
    /// A bare `shapes` uses the default generator settings.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "shapes" {
            return Ok(DatasetSource::default());
        }
        let source = if let Some(p) = s.strip_prefix("dir:") {
            DatasetSource::Dir { path: p.into() }
        } else if let Some(p) = s.strip_prefix("cifar10:") {
            DatasetSource::Cifar {
                variant: CifarVariant::Cifar10,
                path: p.into(),
            }
        } else if let Some(p) = s.strip_prefix("cifar100:") {
            DatasetSource::Cifar {
                variant: CifarVariant::Cifar100,
                path: p.into(),
            }
        } else {
            return Err(Error::Config(format!(
                "dataset must be `shapes`, `dir:<path>`, `cifar10:<file>` or `cifar100:<file>`, got `{s}`"
            )));
        };
        Ok(source)
    }

    /// The training split (or the only split of a file/directory source).
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Shapes { seed, spec } => Ok(data::gen_synthetic(*seed, *spec)?.0),
            DatasetSource::Dir { path } => LabeledDataset::load_dir(path),
            DatasetSource::Cifar { variant, path } => data::load_cifar(path, *variant),
        }
    }

    /// Train and held-out splits of the generator; file sources have no
    /// implicit test split.
    pub fn load_splits(&self) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        match self {
            DatasetSource::Shapes { seed, spec } => {
                let (train, test) = data::gen_synthetic(*seed, *spec)?;
                Ok((train, Some(test)))
            }
            other => Ok((other.load()?, None)),
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Shapes { .. } => f.write_str("shapes"),
            DatasetSource::Dir { path } => write!(f, "dir:{}", path.display()),
            DatasetSource::Cifar { variant, path } => {
                let tag = match variant {
                    CifarVariant::Cifar10 => "cifar10",
                    CifarVariant::Cifar100 => "cifar100",
                };
                write!(f, "{tag}:{}", path.display())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Total optimization budget `B` (grad steps per image).
    pub budget: usize,
    /// Number of residual stages `k`.
    pub k: usize,
    /// Merge ratio; 1 keeps the optimized image.
    pub alpha: f32,
    /// When false the merge code is skipped entirely.
    pub arc_enabled: bool,
    pub d_ds: usize,
    pub d_orig: usize,
    pub ipc: usize,
    /// Patch mosaic side: 1 (1x1) or 2 (2x2).
    pub grid: usize,
    pub lambda: f32,
    pub adam: AdamHyper,
    pub scheduler: Scheduler,
    pub policy: PrecisionPolicy,
    pub seed: u64,
    /// Random crops scored per patch cell.
    pub candidates: usize,
    /// Area fraction range of candidate crops.
    pub crop_scale: (f32, f32),
    /// Classes per optimized batch.
    pub class_group: usize,
    /// Random-resized-crop plus flip of the working batch before every
    /// recovery step.
    pub augment: bool,
    /// Area fraction range of the recovery crops.
    pub augment_scale: (f32, f32),
    pub dataset: DatasetSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            budget: 2000,
            k: 3,
            alpha: 0.5,
            arc_enabled: true,
            d_ds: 24,
            d_orig: 32,
            ipc: 10,
            grid: 1,
            lambda: 1.0,
            adam: AdamHyper::default(),
            scheduler: Scheduler::CosineGlobal,
            policy: PrecisionPolicy::full32(),
            seed: 0,
            candidates: 8,
            crop_scale: (0.5, 1.0),
            class_group: 10,
            augment: false,
            augment_scale: (0.5, 1.0),
            dataset: DatasetSource::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{value}` for `{key}`")))
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < self.k + 1 {
            return Err(Error::Config(format!(
                "budget {} must be at least k + 1 = {}",
                self.budget,
                self.k + 1
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.d_ds == 0 || self.d_ds > self.d_orig {
            return Err(Error::Config(format!("need 0 < d_ds <= d_orig, got {} and {}", self.d_ds, self.d_orig)));
        }
        if self.ipc == 0 {
            return Err(Error::Config("ipc must be >= 1".into()));
        }
        if !matches!(self.grid, 1 | 2) || !self.d_orig.is_multiple_of(self.grid) {
            return Err(Error::Config(format!("grid {0}x{0} does not tile {1}", self.grid, self.d_orig)));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be >= 1".into()));
        }
        for (name, (lo, hi)) in [("crop", self.crop_scale), ("augment", self.augment_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} scale ({lo}, {hi}) must satisfy 0 < min <= max <= 1")));
            }
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.class_group < 2 {
            return Err(Error::Config("class_group must be >= 2 for batch statistics".into()));
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments are
    /// skipped; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DistillConfig::default();
        let mut shapes = (0u64, SyntheticSpec::default());
        let mut dataset: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "budget" => cfg.budget = parse_value(key, value, line)?,
                "k" => cfg.k = parse_value(key, value, line)?,
                "alpha" => cfg.alpha = parse_value(key, value, line)?,
                "arc_enabled" => cfg.arc_enabled = parse_value(key, value, line)?,
                "d_ds" => cfg.d_ds = parse_value(key, value, line)?,
                "d_orig" => cfg.d_orig = parse_value(key, value, line)?,
                "ipc" => cfg.ipc = parse_value(key, value, line)?,
                "grid" => {
                    cfg.grid = match value {
                        "1x1" => 1,
                        "2x2" => 2,
                        _ => return Err(Error::Config(format!("line {line}: grid must be 1x1 or 2x2"))),
                    }
                }
                "lambda" => cfg.lambda = parse_value(key, value, line)?,
                "lr" => cfg.adam.lr = parse_value(key, value, line)?,
                "beta1" => cfg.adam.beta1 = parse_value(key, value, line)?,
                "beta2" => cfg.adam.beta2 = parse_value(key, value, line)?,
                "eps" => cfg.adam.eps = parse_value(key, value, line)?,
                "scheduler" => cfg.scheduler = value.parse().map_err(|e: Error| e.context(format!("line {line}")))?,
                "params_precision" => {
                    let p: Precision = parse_value(key, value, line)?;
                    cfg.policy = PrecisionPolicy::new(p, cfg.policy.logits_and_ce());
                }
                "logits_precision" => {
                    let p: Precision = parse_value(key, value, line)?;
                    cfg.policy = PrecisionPolicy::new(cfg.policy.params(), p);
                }
                "seed" => cfg.seed = parse_value(key, value, line)?,
                "candidates" => cfg.candidates = parse_value(key, value, line)?,
                "crop_scale_min" => cfg.crop_scale.0 = parse_value(key, value, line)?,
                "crop_scale_max" => cfg.crop_scale.1 = parse_value(key, value, line)?,
                "class_group" => cfg.class_group = parse_value(key, value, line)?,
                "augment" => cfg.augment = parse_value(key, value, line)?,
                "augment_scale_min" => cfg.augment_scale.0 = parse_value(key, value, line)?,
                "augment_scale_max" => cfg.augment_scale.1 = parse_value(key, value, line)?,
                "dataset" => dataset = Some(value.to_string()),
                "shapes_seed" => shapes.0 = parse_value(key, value, line)?,
                "shapes_classes" => shapes.1.num_classes = parse_value(key, value, line)?,
                "shapes_per_class" => shapes.1.per_class = parse_value(key, value, line)?,
                "shapes_size" => shapes.1.size = parse_value(key, value, line)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        cfg.dataset = match dataset.as_deref() {
            None | Some("shapes") => DatasetSource::Shapes {
                seed: shapes.0,
                spec: shapes.1,
            },
            Some(other) => DatasetSource::parse(other).map_err(|e| e.context("dataset"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every key in a fixed order; `parse(serialize())` is a fixed point.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("budget", &self.budget);
        kv("k", &self.k);
        kv("alpha", &self.alpha);
        kv("arc_enabled", &self.arc_enabled);
        kv("d_ds", &self.d_ds);
        kv("d_orig", &self.d_orig);
        kv("ipc", &self.ipc);
        kv("grid", &format!("{0}x{0}", self.grid));
        kv("lambda", &self.lambda);
        kv("lr", &self.adam.lr);
        kv("beta1", &self.adam.beta1);
        kv("beta2", &self.adam.beta2);
        kv("eps", &self.adam.eps);
        kv("scheduler", &self.scheduler);
        kv("params_precision", &self.policy.params());
        kv("logits_precision", &self.policy.logits_and_ce());
        kv("seed", &self.seed);
        kv("candidates", &self.candidates);
        kv("crop_scale_min", &self.crop_scale.0);
        kv("crop_scale_max", &self.crop_scale.1);
        kv("class_group", &self.class_group);
        kv("augment", &self.augment);
        kv("augment_scale_min", &self.augment_scale.0);
        kv("augment_scale_max", &self.augment_scale.1);
        kv("dataset", &self.dataset);
        if let DatasetSource::Shapes { seed, spec } = &self.dataset {
            kv("shapes_seed", seed);
            kv("shapes_classes", &spec.num_classes);
            kv("shapes_per_class", &spec.per_class);
            kv("shapes_size", &spec.size);
        }
        s
    }
}

/// `b = floor(B / (k + 1))` and the final stage length `B - k b`.
pub fn partition_budget(budget: usize, k: usize) -> Result<(usize, usize)> {
    if budget < k + 1 {
        return Err(Error::Config(format!("budget {budget} must be at least k + 1 = {}", k + 1)));
    }
    let b = budget / (k + 1);
    Ok((b, budget - k * b))
}

/// The other of the two working resolutions.
pub fn mro_target(current: usize, d_ds: usize, d_orig: usize) -> usize {
    if current == d_ds {
        d_orig
    } else {
        d_ds
    }
}

/// Resolution of each of the `k + 1` stages, starting downsampled.
pub fn stage_resolutions(k: usize, d_ds: usize, d_orig: usize) -> Vec<usize> {
    let mut res = Vec::with_capacity(k + 1);
    let mut cur = d_ds;
    for _ in 0..=k {
        res.push(cur);
        cur = mro_target(cur, d_ds, d_orig);
    }
    res
}

/// `alpha * x + (1 - alpha) * resample(patch, shape(x))`, per element.
pub fn arc_merge(x: &Tensor, patch: &Tensor, alpha: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("merge ratio {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(x.clone());
    }
    let d = x.dims();
    let p = resample(patch, (d[d.len() - 2], d[d.len() - 1]))?;
    if p.dims() != d {
        return Err(Error::Dimension {
            op: "arc_merge",
            axis: "numel",
            expected: x.numel(),
            actual: p.numel(),
        });
    }
    if alpha == 0.0 {
        return Ok(p);
    }
    let xs = x.values();
    let merged = xs
        .iter()
        .zip(p.values().iter())
        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Tensor::new(d.to_vec(), merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProvenance {
    /// Dataset index of each cell's source image.
    pub sources: Vec<usize>,
    /// Winning crop box `(top, left, side)` per cell.
    pub boxes: Vec<(usize, usize, usize)>,
    /// Index of the winning candidate per cell.
    pub chosen: Vec<usize>,
    /// Teacher confidence on the true class of the winner, per cell.
    pub scores: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub class: usize,
    pub slot: usize,
    /// `[C, D_orig, D_orig]`.
    pub image: Tensor,
    pub provenance: PatchProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBank {
    pub entries: Vec<PatchEntry>,
    pub num_classes: usize,
    pub ipc: usize,
    /// Normalization of the source dataset; bounds the exported pixels.
    pub normalization: Normalization,
    /// Selection procedure: confidence-scored random crops, a simplified
    /// stand-in for observer-model patch selection.
    pub selection: String,
}

impl PatchBank {
    pub fn class_entries(&self, class: usize) -> impl Iterator<Item = &PatchEntry> {
        self.entries.iter().filter(move |e| e.class == class)
    }

    /// All patches as `[N, C, D, D]` with their labels.
    pub fn as_batch(&self) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<Tensor> = self.entries.iter().map(|e| e.image.clone()).collect();
        Ok((Tensor::stack(&images)?, self.entries.iter().map(|e| e.class).collect()))
    }
}

/// Samples `candidates` random crops per cell, keeps the one the teacher is
/// most confident about (first wins ties), and tiles the winners.
pub fn init_patches(dataset: &LabeledDataset, teacher: &TrainedModel, cfg: &DistillConfig) -> Result<PatchBank> {
    cfg.validate()?;
    let (c, h, w) = dataset.image_dims();
    let cells = cfg.grid * cfg.grid;
    let cell = cfg.d_orig / cfg.grid;
    let need = cfg.ipc * cells;
    let mut entries = Vec::with_capacity(dataset.num_classes * cfg.ipc);
    for class in 0..dataset.num_classes {
        let mut pool = dataset.indices_of_class(class);
        if pool.len() < need {
            return Err(Error::Data(format!(
                "class {class} has {} images, needs {need} for ipc {} with a {2}x{2} grid",
                pool.len(),
                cfg.ipc,
                cfg.grid
            )));
        }
        pool.shuffle(&mut rng::stream(cfg.seed, &[PATCH_STREAM, class as u64]));
        for slot in 0..cfg.ipc {
            let mut prov = PatchProvenance {
                sources: Vec::with_capacity(cells),
                boxes: Vec::with_capacity(cells),
                chosen: Vec::with_capacity(cells),
                scores: Vec::with_capacity(cells),
            };
            let mut mosaic = vec![0.0f32; c * cfg.d_orig * cfg.d_orig];
            for ci in 0..cells {
                let src = pool[slot * cells + ci];
                let mut r = rng::stream(cfg.seed, &[PATCH_STREAM, class as u64, slot as u64, ci as u64]);
                let img = dataset.image(src);
                let mut boxes = Vec::with_capacity(cfg.candidates);
                let mut crops = Vec::with_capacity(cfg.candidates);
                for _ in 0..cfg.candidates {
                    let bx = data::random_square_box(h, w, cfg.crop_scale, &mut r);
                    let crop = data::crop(img, c, h, w, bx);
                    crops.push(resample(&crop, (cfg.d_orig, cfg.d_orig))?.reshape(vec![c, cfg.d_orig, cfg.d_orig])?);
                    boxes.push(bx);
                }
                let (logits, _) = teacher.forward_logits(&Tensor::stack(&crops)?, BnMode::Eval, Precision::Full32)?;
                let probs = kernels::softmax_rows(&logits.values(), teacher.spec.num_classes);
                let k = teacher.spec.num_classes;
                let mut best = 0;
                for j in 1..cfg.candidates {
                    if probs[j * k + class] > probs[best * k + class] {
                        best = j;
                    }
                }
                let winner = if cell == cfg.d_orig {
                    crops.swap_remove(best)
                } else {
                    resample(&crops[best], (cell, cell))?
                };
                let wv = winner.values();
                let (oy, ox) = ((ci / cfg.grid) * cell, (ci % cfg.grid) * cell);
                for ch in 0..c {
                    for y in 0..cell {
                        let dst = ch * cfg.d_orig * cfg.d_orig + (oy + y) * cfg.d_orig + ox;
                        let srow = ch * cell * cell + y * cell;
                        mosaic[dst..dst + cell].copy_from_slice(&wv[srow..srow + cell]);
                    }
                }
                prov.sources.push(src);
                prov.boxes.push(boxes[best]);
                prov.chosen.push(best);
                prov.scores.push(probs[best * k + class] as f32);
            }
            entries.push(PatchEntry {
                class,
                slot,
                image: Tensor::new(vec![c, cfg.d_orig, cfg.d_orig], mosaic)?,
                provenance: prov,
            });
        }
    }
    Ok(PatchBank {
        entries,
        num_classes: dataset.num_classes,
        ipc: cfg.ipc,
        normalization: dataset.normalization.clone(),
        selection: "confidence-scored random crops (simplified observer selection)".into(),
    })
}

/// Counters proving the schedule ran as configured, per image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub grad_steps: usize,
    pub arc_merges: usize,
    /// Resolution in effect during each stage (k residual stages + final).
    pub stage_resolutions: Vec<usize>,
    /// Every resolution the working images held.
    pub resolutions_seen: Vec<usize>,
}

impl Instrumentation {
    fn saw(&mut self, res: usize) {
        if !self.resolutions_seen.contains(&res) {
            self.resolutions_seen.push(res);
        }
    }
}

/// One optimized batch (a class, or a group of classes when ipc is 1).
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub classes: Vec<usize>,
    pub slots: Vec<usize>,
    /// `(class, slot, [C, D_orig, D_orig])` in input order.
    pub images: Vec<(usize, usize, Tensor)>,
    pub trace: LossTrace,
    pub entropy: EntropyTrace,
    pub instrumentation: Instrumentation,
}

fn learning_rate(cfg: &DistillConfig, step: usize, stage_start: usize, stage_len: usize) -> f32 {
    match cfg.scheduler {
        Scheduler::CosineGlobal => cfg.adam.lr * cosine_factor(step, cfg.budget),
        Scheduler::CosineStage => cfg.adam.lr * cosine_factor(step - stage_start, stage_len),
        Scheduler::Constant => cfg.adam.lr,
    }
}

fn entropy_checkpoint(step: usize, x: &Tensor, teacher: &TrainedModel) -> Result<EntropyCheckpoint> {
    Ok(EntropyCheckpoint {
        step,
        pixel_entropy_bits: metrics::pixel_entropy(x, ENTROPY_BINS)?,
        feature_entropy_bits: metrics::feature_entropy(teacher, x)?,
    })
}

/// Runs the full residual-matching schedule on a batch of patches; exported
/// images are clamped to the normalized range of `norm`.
pub fn distill_class(
    cfg: &DistillConfig,
    objective: &RecoveryObjective,
    entries: &[&PatchEntry],
    norm: &Normalization,
) -> Result<JobOutput> {
    cfg.validate()?;
    if entries.len() < 2 {
        return Err(Error::contract(format!(
            "a distillation batch needs >= 2 images for batch statistics, got {}",
            entries.len()
        )));
    }
    let (b, final_steps) = partition_budget(cfg.budget, cfg.k)?;
    let patches = Tensor::stack(&entries.iter().map(|e| e.image.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = entries.iter().map(|e| e.class).collect();
    let teacher = &objective.teachers()[0];

    let mut res = cfg.d_ds;
    let mut x = resample(&patches, (res, res))?;
    let mut state = AdamState::new(x.numel(), cfg.adam);
    let mut inst = Instrumentation::default();
    let mut trace = LossTrace::default();
    let mut entropy = EntropyTrace::default();
    entropy.checkpoints.push(entropy_checkpoint(0, &x, teacher)?);
    inst.saw(res);

    let mut aug_rng = rng::stream(cfg.seed, &[AUGMENT_STREAM, entries[0].slot as u64, entries[0].class as u64]);
    let mut step = 0;
    for stage in 0..=cfg.k {
        let len = if stage < cfg.k { b } else { final_steps };
        let start = step;
        inst.stage_resolutions.push(res);
        for _ in 0..len {
            let ctx = |e: Error| e.context(format!("stage {} step {step}", stage + 1));
            let (report, grad) = if cfg.augment {
                let view = CropFlip::sample(entries.len(), res, cfg.augment_scale, &mut aug_rng);
                let (report, grad) = objective.evaluate(&view.apply(&x)?, &labels).map_err(ctx)?;
                (report, view.backward(&grad, &x).map_err(ctx)?)
            } else {
                objective.evaluate(&x, &labels).map_err(ctx)?
            };
            trace.push(step, &report);
            state.lr = learning_rate(cfg, step, start, len);
            grad_step(&mut x, &grad, &mut state).map_err(ctx)?;
            inst.grad_steps += 1;
            step += 1;
        }
        if stage == cfg.k {
            break;
        }
        let next = mro_target(res, cfg.d_ds, cfg.d_orig);
        if next != res {
            x = resample(&x, (next, next))?;
            state.reset(x.numel());
            res = next;
            inst.saw(res);
        }
        if cfg.arc_enabled {
            x = arc_merge(&x, &patches, cfg.alpha)?;
            inst.arc_merges += 1;
        }
        entropy.checkpoints.push(entropy_checkpoint(step, &x, teacher)?);
    }
    if res != cfg.d_orig {
        x = resample(&x, (cfg.d_orig, cfg.d_orig))?;
    }
    if let Some(data) = x.data_mut() {
        norm.clamp_normalized(data, cfg.d_orig * cfg.d_orig);
    }
    entropy.checkpoints.push(entropy_checkpoint(step, &x, teacher)?);
    if !x.all_finite() {
        return Err(Error::NonFinite {
            term: crate::error::LossTerm::Gradient,
            precision: Precision::Full32,
        });
    }
    let mut images = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let img = x.slice_batch(i)?;
        images.push((e.class, e.slot, img));
    }
    let mut classes: Vec<usize> = labels.clone();
    classes.dedup();
    let mut slots: Vec<usize> = entries.iter().map(|e| e.slot).collect();
    slots.sort_unstable();
    slots.dedup();
    Ok(JobOutput {
        classes,
        slots,
        images,
        trace,
        entropy,
        instrumentation: inst,
    })
}

/// A per-image square crop, resized back to the working resolution, with an
/// optional horizontal flip. Linear in the pixels, so the adjoint is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct CropFlip {
    side: usize,
    /// `(top, left, crop side, flipped)` per image.
    views: Vec<(usize, usize, usize, bool)>,
}

impl CropFlip {
    pub fn sample(n: usize, side: usize, scale: (f32, f32), rng: &mut rng::Rng) -> Self {
        let views = (0..n)
            .map(|_| {
                let (top, left, s) = data::random_square_box(side, side, scale, rng);
                (top, left, s, rng.gen_bool(0.5))
            })
            .collect();
        CropFlip { side, views }
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        match *x.dims() {
            [n, c, h, w] if n == self.views.len() && h == self.side && w == self.side => Ok(c),
            _ => Err(Error::contract(format!(
                "crop view of {} images at {}px cannot apply to {:?}",
                self.views.len(),
                self.side,
                x.dims()
            ))),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check(x)?;
        let d = self.side;
        let src = x.values();
        let mut out = vec![0.0f32; src.len()];
        let mut plane = Vec::new();
        for (i, &(top, left, s, flip)) in self.views.iter().enumerate() {
            let plan = ResamplePlan::new((s, s), (d, d))?;
            for ch in 0..c {
                let base = (i * c + ch) * d * d;
                plane.clear();
                for y in top..top + s {
                    plane.extend_from_slice(&src[base + y * d + left..base + y * d + left + s]);
                }
                let dst = &mut out[base..base + d * d];
                plan.apply_plane(&plane, dst);
                if flip {
                    dst.chunks_mut(d).for_each(<[f32]>::reverse);
                }
            }
        }
        Tensor::new(x.dims().to_vec(), out)
    }

    /// Pulls a gradient with respect to `apply(x)` back onto `x`.
    pub fn backward(&self, grad: &[f32], x: &Tensor) -> Result<Vec<f32>> {
        let c = self.check(x)?;
        let d = self.side;
        let mut out = vec![0.0f32; grad.len()];
        let mut g = vec![0.0f32; d * d];
        let mut plane = Vec::new();
        for (i, &(top, left, s, flip)) in self.views.iter().enumerate() {
            let plan = ResamplePlan::new((s, s), (d, d))?;
            for ch in 0..c {
                let base = (i * c + ch) * d * d;
                g.copy_from_slice(&grad[base..base + d * d]);
                if flip {
                    g.chunks_mut(d).for_each(<[f32]>::reverse);
                }
                plane.clear();
                plane.resize(s * s, 0.0);
                plan.transpose_plane(&g, &mut plane);
                for (y, row) in plane.chunks(s).enumerate() {
                    let at = base + (top + y) * d + left;
                    out[at..at + s].copy_from_slice(row);
                }
            }
        }
        Ok(out)
    }
}

/// Job batches: for every slot, one image from each class of a group of up
/// to `class_group` classes, so batch statistics mix classes the way the
/// teacher's running statistics do.
pub fn plan_jobs<'a>(cfg: &DistillConfig, bank: &'a PatchBank) -> Vec<Vec<&'a PatchEntry>> {
    let classes: Vec<usize> = (0..bank.num_classes).collect();
    let mut groups: Vec<Vec<usize>> = classes.chunks(cfg.class_group.max(2)).map(|g| g.to_vec()).collect();
    // a lone trailing class cannot form batch statistics on its own
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let tail = groups.pop().unwrap_or_default();
        if let Some(prev) = groups.last_mut() {
            prev.extend(tail);
        }
    }
    let mut jobs = Vec::with_capacity(bank.ipc * groups.len());
    for slot in 0..bank.ipc {
        for group in &groups {
            let batch: Vec<&PatchEntry> = group
                .iter()
                .filter_map(|&c| bank.entries.iter().find(|e| e.class == c && e.slot == slot))
                .collect();
            jobs.push(batch);
        }
    }
    jobs
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledImage {
    pub class: usize,
    pub slot: usize,
    /// `[C, D_orig, D_orig]`, normalized space.
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSet {
    pub config: DistillConfig,
    pub images: Vec<DistilledImage>,
    pub jobs: Vec<JobOutput>,
}

impl DistilledSet {
    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.class).collect()
    }

    /// All images as `[N, C, D, D]`.
    pub fn batch(&self) -> Result<Tensor> {
        Tensor::stack(&self.images.iter().map(|i| i.image.clone()).collect::<Vec<_>>())
    }

    /// Wraps raw patches (the no-optimization baseline) in the same container.
    pub fn from_patches(config: &DistillConfig, bank: &PatchBank) -> Self {
        DistilledSet {
            config: config.clone(),
            images: bank
                .entries
                .iter()
                .map(|e| DistilledImage {
                    class: e.class,
                    slot: e.slot,
                    image: e.image.clone(),
                })
                .collect(),
            jobs: Vec::new(),
        }
    }

}

impl JobOutput {
    /// Stable job label such as `slot3-c0-7`.
    pub fn name(&self) -> String {
        let slots: Vec<String> = self.slots.iter().map(|s| s.to_string()).collect();
        let first = self.classes.first().copied().unwrap_or(0);
        let last = self.classes.last().copied().unwrap_or(0);
        format!("slot{}-c{first}-{last}", slots.join("_"))
    }
}

/// Distills every class of the bank, one parallel job per batch. Results do
/// not depend on the number of threads; see [`crate::pool::with_workers`].
pub fn distill(cfg: &DistillConfig, teachers: &[TrainedModel], bank: &PatchBank) -> Result<DistilledSet> {
    cfg.validate()?;
    let objective = RecoveryObjective::new(teachers, cfg.lambda, cfg.policy)?;
    let jobs = plan_jobs(cfg, bank);
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|entries| {
            let first = entries.first().map_or(0, |e| e.class);
            distill_class(cfg, &objective, entries, &bank.normalization).map_err(|e| e.context(format!("class {first}")))
        })
        .collect::<Result<_>>()?;
    let mut images: Vec<DistilledImage> = outputs
        .iter()
        .flat_map(|j| j.images.iter())
        .map(|(class, slot, image)| DistilledImage {
            class: *class,
            slot: *slot,
            image: image.clone(),
        })
        .collect();
    images.sort_by_key(|i| (i.class, i.slot));
    Ok(DistilledSet {
        config: cfg.clone(),
        images,
        jobs: outputs,
    })
}
