use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use resmatch_core::data::{self, SyntheticSpec};
use resmatch_core::distill::{self, DatasetSource, DistillConfig};
use resmatch_core::eval::{self, StudentHyper};
use resmatch_core::io::{self, DatasetRecord, RunManifest, TeacherRecord};
use resmatch_core::metrics;
use resmatch_core::model::{self, Arch, ModelSpec, PretrainHyper, TrainedModel};
use resmatch_core::{pool, Tensor};

const WORKERS_ENV: &str = "RESMATCH_WORKERS";

#[derive(Parser)]
#[command(name = "resmatch", version, about = "Residual-matching dataset distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset as <out>/train and <out>/test.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train a teacher checkpoint.
    Pretrain {
        /// `shapes`, `dir:<path>`, `cifar10:<file>` or `cifar100:<file>`.
        #[arg(long, default_value = "shapes")]
        data: String,
        /// Held-out split; the shapes generator supplies its own.
        #[arg(long)]
        test: Option<String>,
        #[arg(long, default_value = "cnn-m")]
        arch: Arch,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a dataset from a config, or replay a previous run's manifest.
    Distill {
        #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train students on a distilled set and report test accuracy.
    Eval {
        #[arg(long)]
        distilled: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "cnn-s")]
        student: Arch,
        /// Defaults to the held-out split of the run's shapes generator.
        #[arg(long)]
        testset: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        /// Cross-entropy to hard labels instead of KL to teacher soft labels.
        #[arg(long)]
        hard_labels: bool,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entropy diagnostics of a distilled set.
    Metrics {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = metrics_bins())]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic and measured cost of the multi-resolution schedule.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "cnn-m")]
        arch: Arch,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

fn metrics_bins() -> usize {
    distill::ENTROPY_BINS
}

fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{WORKERS_ENV} must be a non-negative integer, got `{v}`")),
        Err(_) => Ok(0),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_teacher(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("loading teacher {}", path.display()))
}

fn gen_data(out: &Path, seed: u64, spec: SyntheticSpec) -> Result<()> {
    let (train, test) = data::gen_synthetic(seed, spec)?;
    train.save_dir(out.join("train"))?;
    test.save_dir(out.join("test"))?;
    print_json(&serde_json::json!({
        "name": train.name,
        "train": train.len(),
        "test": test.len(),
        "train_digest": train.digest(),
        "test_digest": test.digest(),
    }))
}

fn pretrain(data: &str, test: Option<&str>, arch: Arch, hyper: PretrainHyper, out: &Path) -> Result<()> {
    let (train, implicit_test) = DatasetSource::parse(data)?.load_splits()?;
    let test = match test {
        Some(src) => {
            let mut t = DatasetSource::parse(src)?.load()?;
            t.renormalize(&train.normalization);
            Some(t)
        }
        None => implicit_test,
    };
    let spec = ModelSpec::new(arch, train.image_dims(), train.num_classes);
    let fresh = model::build_model(spec, hyper.seed)?;
    let trained = model::pretrain(&fresh, &train, test.as_ref(), &hyper)?;
    trained.save(out)?;
    print_json(&trained.provenance)
}

fn distill_cmd(
    config: Option<&Path>,
    manifest: Option<&Path>,
    teacher_paths: &[PathBuf],
    out: &Path,
    workers: usize,
) -> Result<()> {
    let start = Instant::now();
    let (cfg, replay) = match (config, manifest) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = DistillConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
            (cfg, None)
        }
        (None, Some(path)) => {
            let m = RunManifest::load(path)?;
            (DistillConfig::parse(&m.config_text)?, Some(m))
        }
        (None, None) => bail!("either --config or --manifest is required"),
    };
    let paths: Vec<PathBuf> = match (&replay, teacher_paths.is_empty()) {
        (Some(m), true) => m.teachers.iter().map(|t| t.path.clone()).collect(),
        (None, true) => bail!("--teachers needs at least one checkpoint"),
        _ => teacher_paths.to_vec(),
    };
    let teachers = paths.iter().map(|p| load_teacher(p)).collect::<Result<Vec<_>>>()?;
    if let Some(m) = &replay {
        if m.teachers.len() != teachers.len() {
            bail!("manifest lists {} teachers, got {}", m.teachers.len(), teachers.len());
        }
        for (rec, t) in m.teachers.iter().zip(&teachers) {
            if rec.digest != t.digest() {
                bail!("teacher {} does not match the manifest digest", rec.path.display());
            }
        }
    }
    let dataset = cfg.dataset.load().context("loading the dataset")?;
    if let Some(m) = &replay {
        if m.dataset.digest != dataset.digest() {
            bail!("dataset {} does not match the manifest digest", cfg.dataset);
        }
    }
    for (p, t) in paths.iter().zip(&teachers) {
        if t.spec.num_classes != dataset.num_classes || t.spec.input.0 != dataset.image_dims().0 {
            bail!(
                "teacher {} expects {} classes x {} channels; dataset has {} x {}",
                p.display(),
                t.spec.num_classes,
                t.spec.input.0,
                dataset.num_classes,
                dataset.image_dims().0
            );
        }
    }
    let set = pool::with_workers(workers, || -> resmatch_core::Result<_> {
        let bank = distill::init_patches(&dataset, &teachers[0], &cfg)?;
        let set = distill::distill(&cfg, &teachers, &bank)?;
        Ok((bank, set))
    })??;
    let (bank, set) = set;
    let records = paths.iter().zip(&teachers).map(|(p, t)| TeacherRecord::new(p, t)).collect();
    let manifest = RunManifest::new(&set, &bank, records, DatasetRecord::new(&dataset), start.elapsed().as_secs_f64());
    let written = io::write_distilled(out, &set, &manifest)?;
    print_json(&serde_json::json!({
        "out": out,
        "images": written.images.len(),
        "jobs": written.jobs.iter().map(|j| &j.instrumentation).collect::<Vec<_>>(),
        "wall_time_secs": written.wall_time_secs,
    }))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    distilled: &Path,
    teacher: &Path,
    student: Arch,
    testset: Option<&str>,
    seeds: u64,
    hyper: StudentHyper,
    temperature: f32,
    hard_labels: bool,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let (manifest, images) = io::load_distilled(distilled)?;
    if images.is_empty() {
        bail!("{} holds no images", distilled.display());
    }
    let teacher = load_teacher(teacher)?;
    let batch = Tensor::stack(&images.iter().map(|i| i.image.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = images.iter().map(|i| i.class).collect();
    let mut test = match testset {
        Some(src) => DatasetSource::parse(src)?.load()?,
        None => match &manifest.config.dataset {
            src @ DatasetSource::Shapes { .. } => src.load_splits()?.1.expect("generator yields a test split"),
            other => bail!("--testset is required for dataset source {other}"),
        },
    };
    test.renormalize(&manifest.dataset.normalization);
    let d = batch.dims();
    let spec = ModelSpec::new(student, (d[1], d[2], d[3]), teacher.spec.num_classes);
    let soft = if hard_labels {
        None
    } else {
        Some(eval::generate_soft_labels(&teacher, &batch, temperature)?)
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = pool::with_workers(workers, || {
        eval::train_student(spec, &batch, &labels, soft.as_ref(), &hyper, &seeds, Some(&test))
    })??;
    write_json(out, &report)?;
    print_json(&serde_json::json!({ "top1": report.top1, "std": report.std, "accuracies": report.accuracies }))
}

fn metrics_cmd(images: &Path, teacher: &Path, bins: usize, out: &Path) -> Result<()> {
    let (manifest, imgs) = io::load_distilled(images)?;
    if imgs.is_empty() {
        bail!("{} holds no images", images.display());
    }
    let teacher = load_teacher(teacher)?;
    let batch = Tensor::stack(&imgs.iter().map(|i| i.image.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = imgs.iter().map(|i| i.class).collect();
    let ds = data::LabeledDataset::new(
        "distilled",
        batch.clone(),
        labels,
        teacher.spec.num_classes,
        data::Split::Train,
        manifest.dataset.normalization.clone(),
    )?;
    let report = serde_json::json!({
        "images": imgs.len(),
        "pixel_entropy_bits": metrics::pixel_entropy(&batch, bins)?,
        "feature_entropy_bits": metrics::feature_entropy(&teacher, &batch)?,
        "entropy_bound": metrics::entropy_bound(&teacher, &ds, imgs.len())?,
    });
    write_json(out, &report)?;
    print_json(&report)
}

fn cost_cmd(config: &Path, arch: Arch, classes: usize) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = DistillConfig::parse(&text).with_context(|| format!("parsing {}", config.display()))?;
    let spec = ModelSpec::new(arch, (3, cfg.d_orig, cfg.d_orig), classes);
    let report = metrics::cost_report(&spec, cfg.budget, cfg.k, cfg.d_ds, cfg.d_orig)?;
    print_json(&report)
}

fn run(cli: Cli) -> Result<()> {
    let workers = workers()?;
    match cli.command {
        Command::GenData {
            out,
            seed,
            classes,
            per_class,
            size,
        } => gen_data(
            &out,
            seed,
            SyntheticSpec {
                num_classes: classes,
                per_class,
                size,
            },
        ),
        Command::Pretrain {
            data,
            test,
            arch,
            epochs,
            batch_size,
            lr,
            seed,
            out,
        } => {
            let hyper = PretrainHyper {
                epochs,
                batch_size,
                lr,
                seed,
                ..PretrainHyper::default()
            };
            pool::with_workers(workers, || pretrain(&data, test.as_deref(), arch, hyper, &out))?
        }
        Command::Distill {
            config,
            manifest,
            teachers,
            out,
        } => distill_cmd(config.as_deref(), manifest.as_deref(), &teachers, &out, workers),
        Command::Eval {
            distilled,
            teacher,
            student,
            testset,
            seeds,
            epochs,
            lr,
            batch_size,
            temperature,
            hard_labels,
            no_augment,
            out,
        } => {
            let defaults = StudentHyper::default();
            let hyper = StudentHyper {
                epochs: epochs.unwrap_or(defaults.epochs),
                lr: lr.unwrap_or(defaults.lr),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                augment: !no_augment,
                ..defaults
            };
            eval_cmd(
                &distilled,
                &teacher,
                student,
                testset.as_deref(),
                seeds,
                hyper,
                temperature,
                hard_labels,
                &out,
                workers,
            )
        }
        Command::Metrics {
            images,
            teacher,
            bins,
            out,
        } => metrics_cmd(&images, &teacher, bins, &out),
        Command::Cost { config, arch, classes } => cost_cmd(&config, arch, classes),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
