//! Student training on a distilled set and top-1 evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, BnMode, Tape};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{build_model, cosine_factor, ModelSpec, TrainedModel};
use crate::recovery::{adam_update, AdamHyper, AdamState};
use crate::rng;
use crate::tensor::{Precision, Tensor};

pub use crate::model::evaluate;

/// Teacher probability vectors, one row per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelSet {
    pub probs: Vec<f32>,
    pub num_classes: usize,
    pub temperature: f32,
    /// Digest of the teacher checkpoint.
    pub teacher_id: String,
}

impl SoftLabelSet {
    pub fn len(&self) -> usize {
        self.probs.len() / self.num_classes.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Eval-mode teacher softmax at temperature `t` for each image of `[N, C, H, W]`.
pub fn generate_soft_labels(teacher: &TrainedModel, images: &Tensor, t: f32) -> Result<SoftLabelSet> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::contract(format!("temperature must be > 0, got {t}")));
    }
    let classes = teacher.spec.num_classes;
    let n = images.dims()[0];
    let mut probs = Vec::with_capacity(n * classes);
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let part: Vec<Tensor> = (start..end).map(|i| images.slice_batch(i)).collect::<Result<_>>()?;
        let (logits, _) = teacher.forward_logits(&Tensor::stack(&part)?, BnMode::Eval, Precision::Full32)?;
        let scaled: Vec<f32> = logits.values().iter().map(|&z| z / t).collect();
        probs.extend(kernels::softmax_rows(&scaled, classes).into_iter().map(|p| p as f32));
    }
    Ok(SoftLabelSet {
        probs,
        num_classes: classes,
        temperature: t,
        teacher_id: teacher.digest(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Cosine horizon multiplier: the schedule spans `epochs * eta`.
    pub eta: usize,
    /// Decoupled weight decay.
    pub weight_decay: f32,
    pub augment: bool,
    pub crop_scale: (f32, f32),
}

impl Default for StudentHyper {
    fn default() -> Self {
        StudentHyper {
            epochs: 300,
            batch_size: 80,
            lr: 0.01,
            eta: 1,
            weight_decay: 0.01,
            augment: true,
            crop_scale: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub student: ModelSpec,
    pub hyper: StudentHyper,
    /// `kl-soft` or `ce-hard`.
    pub loss: String,
    pub temperature: Option<f32>,
    /// How soft labels were produced.
    pub soft_label_protocol: String,
    pub train_images: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f32>,
    pub top1: f32,
    pub std: f32,
}

impl EvalReport {
    fn new(student: ModelSpec, hyper: StudentHyper, soft: Option<&SoftLabelSet>, n: usize, runs: Vec<(u64, f32)>) -> Self {
        let (seeds, accuracies): (Vec<u64>, Vec<f32>) = runs.into_iter().unzip();
        let m = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().map(|&a| a as f64).sum::<f64>() / m;
        let var = if accuracies.len() > 1 {
            accuracies.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        EvalReport {
            student,
            hyper,
            loss: if soft.is_some() { "kl-soft" } else { "ce-hard" }.into(),
            temperature: soft.map(|s| s.temperature),
            soft_label_protocol: "one whole-image eval-mode teacher label per image (simplified batch-specific labels)".into(),
            train_images: n,
            seeds,
            accuracies,
            top1: mean as f32,
            std: var.sqrt() as f32,
        }
    }
}

/// Trains one student from scratch: AdamW with a cosine-annealed rate,
/// random-resized-crop and flip, KL to `soft` rows when given, otherwise
/// cross-entropy to `labels`.
pub fn train_student_once(
    spec: ModelSpec,
    images: &Tensor,
    labels: &[usize],
    soft: Option<&SoftLabelSet>,
    hyper: &StudentHyper,
    seed: u64,
) -> Result<TrainedModel> {
    let n = images.dims()[0];
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "train_student",
            axis: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(s) = soft {
        if s.len() != n || s.num_classes != spec.num_classes {
            return Err(Error::contract(format!(
                "soft labels cover {} images x {} classes, expected {n} x {}",
                s.len(),
                s.num_classes,
                spec.num_classes
            )));
        }
    }
    if n < 2 {
        return Err(Error::contract("student training needs >= 2 images"));
    }
    let mut model = build_model(spec, seed)?;
    let mut states: Vec<AdamState> = model
        .params
        .iter()
        .map(|p| {
            AdamState::new(
                p.tensor.numel(),
                AdamHyper {
                    lr: hyper.lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
            )
        })
        .collect();
    let mut r = rng::stream(seed, &[0x57d]);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = hyper.batch_size.max(2);
    for epoch in 0..hyper.epochs {
        let lr = hyper.lr * cosine_factor(epoch, hyper.epochs * hyper.eta.max(1));
        order.shuffle(&mut r);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let parts: Vec<Tensor> = chunk.iter().map(|&i| images.slice_batch(i)).collect::<Result<_>>()?;
            let mut batch = Tensor::stack(&parts)?;
            if hyper.augment {
                batch = data::random_resized_crop_flip(&batch, hyper.crop_scale, &mut r)?;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.leaf(&batch, false);
            let out = model.forward(&mut tape, &bound, x, BnMode::Train)?;
            let loss = match soft {
                Some(s) => {
                    let target: Vec<f32> = chunk.iter().flat_map(|&i| s.row(i).iter().copied()).collect();
                    tape.kl_divergence(out.logits, &target)?
                }
                None => {
                    let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    tape.softmax_cross_entropy(out.logits, &y)?
                }
            };
            if !tape.scalar(loss).is_finite() {
                return Err(Error::contract(format!("student training diverged at epoch {epoch}")));
            }
            let stats: Vec<(Vec<f32>, Vec<f32>)> = out
                .bn_stats
                .iter()
                .map(|s| (tape.value(s.mean).to_vec(), tape.value(s.var).to_vec()))
                .collect();
            let mut grads = tape.backward(loss)?;
            for ((p, var), st) in model.params.iter_mut().zip(bound.vars()).zip(states.iter_mut()) {
                let g = grads.take_grad(*var).expect("parameter leaves track gradients");
                let w = p.tensor.data_mut().expect("full32 parameters");
                let decay = 1.0 - lr * hyper.weight_decay;
                for v in w.iter_mut() {
                    *v *= decay;
                }
                st.lr = lr;
                adam_update(w, &g, st)?;
            }
            model.update_running_stats(&stats);
        }
    }
    model.provenance.epochs = hyper.epochs;
    model.provenance.seed = seed;
    Ok(model)
}

/// Trains one student per seed (in parallel) and reports test top-1.
pub fn train_student(
    spec: ModelSpec,
    images: &Tensor,
    labels: &[usize],
    soft: Option<&SoftLabelSet>,
    hyper: &StudentHyper,
    seeds: &[u64],
    testset: Option<&LabeledDataset>,
) -> Result<EvalReport> {
    let testset = testset.ok_or_else(|| Error::Data("student evaluation needs a held-out test split".into()))?;
    if testset.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let d = images.dims();
    if d.len() != 4 || (d[1], d[2], d[3]) != spec.input {
        return Err(Error::contract(format!(
            "student expects {:?} inputs, distilled images are {:?}",
            spec.input,
            &d[1..]
        )));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let model = train_student_once(spec, images, labels, soft, hyper, seed)?;
            Ok((seed, evaluate(&model, testset)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(spec, *hyper, soft, d[0], runs))
}
