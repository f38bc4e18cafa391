//! Entropy diagnostics, the multi-resolution cost model and the output
//! entropy bound.
//!
//! Image-level entropies are in bits; the bound uses nats.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, BnMode};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec, TrainedModel, CONV_KERNEL};
use crate::tensor::{Precision, Tensor};

pub const FEATURE_BINS: usize = 64;

fn histogram_entropy_bits(values: impl Iterator<Item = f32> + Clone, bins: usize) -> f64 {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    let mut n = 0usize;
    for v in values.clone() {
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    if n == 0 || hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let span = (hi - lo) as f64;
    for v in values {
        let b = (((v - lo) as f64 / span) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean per-image Shannon entropy (bits) of pixel histograms over each
/// channel's `[min, max]`, averaged over channels then images.
/// Accepts `[N, C, H, W]` or a single `[C, H, W]` image.
pub fn pixel_entropy(images: &Tensor, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::contract(format!("pixel_entropy needs >= 2 bins, got {bins}")));
    }
    let d = images.dims();
    let (n, c, plane) = match d.len() {
        4 => (d[0], d[1], d[2] * d[3]),
        3 => (1, d[0], d[1] * d[2]),
        _ => return Err(Error::contract("pixel_entropy expects [N, C, H, W] or [C, H, W]")),
    };
    if n == 0 || c == 0 || plane == 0 {
        return Err(Error::contract("pixel_entropy on an empty batch"));
    }
    let values = images.values();
    let mut total = 0.0;
    for img in values.chunks_exact(c * plane) {
        let per_channel: f64 = img
            .chunks_exact(plane)
            .map(|ch| histogram_entropy_bits(ch.iter().copied(), bins))
            .sum();
        total += per_channel / c as f64;
    }
    Ok(total / n as f64)
}

/// Mean per-dimension histogram entropy (bits, 64 bins over the observed
/// range) of eval-mode penultimate features.
pub fn feature_entropy(model: &TrainedModel, images: &Tensor) -> Result<f64> {
    let feats = model.features(images)?;
    let (n, f) = (feats.dims()[0], feats.dims()[1]);
    if n == 0 || f == 0 {
        return Ok(0.0);
    }
    let v = feats.values();
    let total: f64 = (0..f)
        .map(|j| histogram_entropy_bits((0..n).map(|i| v[i * f + j]), FEATURE_BINS))
        .sum();
    Ok(total / f as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyCheckpoint {
    pub step: usize,
    pub pixel_entropy_bits: f64,
    pub feature_entropy_bits: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub checkpoints: Vec<EntropyCheckpoint>,
}

impl EntropyTrace {
    pub fn last(&self) -> Option<&EntropyCheckpoint> {
        self.checkpoints.last()
    }
}

/// Normalized cost `1 - (b / B) * ceil(k / 2) * (1 - r)`.
pub fn mro_cost_ratio(budget: usize, k: usize, b: usize, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::contract(format!("resolution ratio must lie in (0, 1], got {r}")));
    }
    if budget == 0 || b * k > budget {
        return Err(Error::contract(format!("stage length {b} x {k} exceeds budget {budget}")));
    }
    let downsampled_stages = k.div_ceil(2) as f64;
    Ok(1.0 - (b as f64 / budget as f64) * downsampled_stages * (1.0 - r))
}

/// Multiply-accumulates of one forward pass over a layer stack, per image.
pub fn layer_macs(layers: &[Layer], input: (usize, usize, usize)) -> Result<u64> {
    let (_, mut h, mut w) = input;
    let mut macs = 0u64;
    for layer in layers {
        match layer {
            Layer::Conv { cin, cout, .. } => {
                let k2 = (CONV_KERNEL * CONV_KERNEL) as u64;
                macs += k2 * (*cin as u64) * (*cout as u64) * (h * w) as u64;
            }
            Layer::MaxPool { name } => match (kernels::window_out(h, 2, 2, 0), kernels::window_out(w, 2, 2, 0)) {
                (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                _ => {
                    return Err(Error::Resolution {
                        layer: name.clone(),
                        height: input.1,
                        width: input.2,
                    })
                }
            },
            Layer::Linear { fin, fout, .. } => macs += (*fin as u64) * (*fout as u64),
            Layer::BatchNorm { .. } | Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
    Ok(macs)
}

/// Conv and linear MACs of `spec` evaluated at `input` (which may differ from
/// the declared input resolution).
pub fn count_flops(spec: &ModelSpec, input: (usize, usize, usize)) -> Result<u64> {
    layer_macs(&spec.layers(), input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "B")]
    pub budget: usize,
    pub k: usize,
    pub b: usize,
    pub r: f64,
    pub analytic_ratio: f64,
    pub measured_flops_mro: u64,
    pub measured_flops_baseline: u64,
    pub measured_ratio: f64,
}

/// Analytic ratio plus forward MACs of the actual stage schedule on `spec`,
/// relative to running every step at `d_orig`.
pub fn cost_report(spec: &ModelSpec, budget: usize, k: usize, d_ds: usize, d_orig: usize) -> Result<CostReport> {
    let (b, final_steps) = crate::distill::partition_budget(budget, k)?;
    let r = (d_ds as f64 / d_orig as f64).powi(2);
    let analytic_ratio = mro_cost_ratio(budget, k, b, r)?;
    let c = spec.input.0;
    let at_orig = count_flops(spec, (c, d_orig, d_orig))?;
    let at_ds = count_flops(spec, (c, d_ds, d_ds))?;
    let mut mro = 0u64;
    for (stage, res) in crate::distill::stage_resolutions(k, d_ds, d_orig).into_iter().enumerate() {
        let steps = if stage < k { b } else { final_steps } as u64;
        mro += steps * if res == d_ds { at_ds } else { at_orig };
    }
    let baseline = budget as u64 * at_orig;
    Ok(CostReport {
        budget,
        k,
        b,
        r,
        analytic_ratio,
        measured_flops_mro: mro,
        measured_flops_baseline: baseline,
        measured_ratio: mro as f64 / baseline as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    pub h_max_nats: f64,
    pub set_size: usize,
    pub bound_nats: f64,
}

/// Maximum per-sample softmax entropy (nats) of the eval-mode model over a
/// dataset, and `set_size * H_max`.
pub fn entropy_bound(model: &TrainedModel, dataset: &LabeledDataset, set_size: usize) -> Result<EntropyBound> {
    if dataset.is_empty() {
        return Err(Error::Data("entropy bound over an empty dataset".into()));
    }
    let classes = model.spec.num_classes;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut h_max = 0.0f64;
    for part in idx.chunks(256) {
        let (logits, _) = model.forward_logits(&dataset.batch(part), BnMode::Eval, Precision::Full32)?;
        let logits = logits.values();
        let logp = kernels::log_softmax_rows(&logits, classes);
        for row in logp.chunks_exact(classes) {
            let h: f64 = row.iter().map(|&lp| -lp.exp() * lp).sum();
            h_max = h_max.max(h);
        }
    }
    Ok(EntropyBound {
        h_max_nats: h_max,
        set_size,
        bound_nats: set_size as f64 * h_max,
    })
}
