//! Small teacher/student CNNs, their pretraining loop and checkpoints.
//!
//! Every architecture is a stack of `conv3x3 -> batchnorm -> relu` blocks
//! with 2x2 max-pooling after some blocks, then global average pooling and a
//! linear head, so any resolution that survives the pooling stack shares the
//! same classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, BatchStatVars, BnMode, Tape, Var};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Precision, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "cnn-s")]
    CnnS,
    #[serde(rename = "cnn-m")]
    CnnM,
    #[serde(rename = "cnn-l")]
    CnnL,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::CnnS, Arch::CnnM, Arch::CnnL];

    /// `(out_channels, pool_after)` per conv block.
    fn blocks(self) -> &'static [(usize, bool)] {
        match self {
            Arch::CnnS => &[(16, true), (32, true)],
            Arch::CnnM => &[(16, true), (32, true), (32, true), (64, false)],
            Arch::CnnL => &[(16, false), (16, true), (32, false), (32, true), (64, false), (64, true)],
        }
    }

    pub fn pool_count(self) -> usize {
        self.blocks().iter().filter(|b| b.1).count()
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-s" => Ok(Arch::CnnS),
            "cnn-m" => Ok(Arch::CnnM),
            "cnn-l" => Ok(Arch::CnnL),
            other => Err(Error::Spec(format!("unknown architecture `{other}` (cnn-s, cnn-m, cnn-l)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::CnnS => "cnn-s",
            Arch::CnnM => "cnn-m",
            Arch::CnnL => "cnn-l",
        })
    }
}

/// Per-channel `(mean, var)` of one BN layer.
pub type LayerStats = (Vec<f32>, Vec<f32>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `(C, H, W)`.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input: (usize, usize, usize), num_classes: usize) -> Self {
        ModelSpec {
            arch,
            input,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "need >= 1 input channel and >= 2 classes, got {c} and {}",
                self.num_classes
            )));
        }
        let factor = 1usize << self.arch.pool_count();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Spec(format!(
                "{} pools by {factor}; input {h}x{w} does not divide cleanly",
                self.arch
            )));
        }
        Ok(())
    }

    /// Ordered layer inventory.
    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut cin = self.input.0;
        for (i, &(cout, pool)) in self.arch.blocks().iter().enumerate() {
            let idx = i + 1;
            layers.push(Layer::Conv {
                name: format!("conv{idx}"),
                cin,
                cout,
            });
            layers.push(Layer::BatchNorm {
                name: format!("bn{idx}"),
                channels: cout,
            });
            layers.push(Layer::Relu);
            if pool {
                layers.push(Layer::MaxPool {
                    name: format!("pool{idx}"),
                });
            }
            cin = cout;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear {
            name: "fc".into(),
            fin: cin,
            fout: self.num_classes,
        });
        layers
    }

    pub fn bn_layer_count(&self) -> usize {
        self.arch.blocks().len()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.blocks().last().map_or(self.input.0, |b| b.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, cin: usize, cout: usize },
    BatchNorm { name: String, channels: usize },
    Relu,
    MaxPool { name: String },
    GlobalAvgPool,
    Linear { name: String, fin: usize, fout: usize },
}

pub const CONV_KERNEL: usize = 3;

/// A named learnable tensor such as `conv1.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub dataset_id: String,
    pub epochs: usize,
    pub train_accuracy: Option<f32>,
    pub test_accuracy: Option<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    /// Learnable tensors in layer order (weight/bias, gamma/beta, ...).
    pub params: Vec<Param>,
    /// Running statistics per batchnorm layer, always full32.
    pub bn_running: Vec<RunningStats>,
    pub provenance: Provenance,
}

/// Tape handles of a model's parameters, in `TrainedModel::params` order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Result of a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    /// Globally pooled penultimate features `[N, feature_dim]`.
    pub features: Var,
    /// Batch statistics at each batchnorm input (train mode only).
    pub bn_stats: Vec<BatchStatVars>,
    /// The tensor entering each batchnorm layer.
    pub bn_inputs: Vec<Var>,
}

fn kaiming_uniform(n: usize, fan_in: usize, rng: &mut rng::Rng) -> Vec<f32> {
    // gain sqrt(2) for relu: bound = sqrt(6 / fan_in)
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fresh model: Kaiming-uniform conv/linear weights, zero conv bias,
/// fan-in uniform linear bias, gamma = 1, beta = 0, running (0, 1).
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<TrainedModel> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[0x1417]);
    let mut params = Vec::new();
    let mut bn_running = Vec::new();
    for layer in spec.layers() {
        match layer {
            Layer::Conv { name, cin, cout } => {
                let fan_in = cin * CONV_KERNEL * CONV_KERNEL;
                params.push(Param {
                    name: format!("{name}.weight"),
                    tensor: Tensor::new(
                        vec![cout, cin, CONV_KERNEL, CONV_KERNEL],
                        kaiming_uniform(cout * fan_in, fan_in, &mut rng),
                    )?,
                });
                params.push(Param {
                    name: format!("{name}.bias"),
                    tensor: Tensor::zeros(&[cout]),
                });
            }
            Layer::BatchNorm { name, channels } => {
                params.push(Param {
                    name: format!("{name}.gamma"),
                    tensor: Tensor::full(&[channels], 1.0),
                });
                params.push(Param {
                    name: format!("{name}.beta"),
                    tensor: Tensor::zeros(&[channels]),
                });
                bn_running.push(RunningStats {
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                });
            }
            Layer::Linear { name, fin, fout } => {
                params.push(Param {
                    name: format!("{name}.weight"),
                    tensor: Tensor::new(vec![fout, fin], kaiming_uniform(fout * fin, fin, &mut rng))?,
                });
                let bound = 1.0 / (fin as f32).sqrt();
                params.push(Param {
                    name: format!("{name}.bias"),
                    tensor: Tensor::new(vec![fout], (0..fout).map(|_| rng.gen_range(-bound..bound)).collect())?,
                });
            }
            Layer::Relu | Layer::MaxPool { .. } | Layer::GlobalAvgPool => {}
        }
    }
    Ok(TrainedModel {
        spec,
        params,
        bn_running,
        provenance: Provenance {
            seed,
            ..Provenance::default()
        },
    })
}

impl TrainedModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// In-memory bytes of the learnable parameters.
    pub fn param_bytes(&self) -> usize {
        self.params.iter().map(|p| p.tensor.nbytes()).sum()
    }

    pub fn param_precision(&self) -> Precision {
        self.params.first().map_or(Precision::Full32, |p| p.tensor.precision())
    }

    /// Copy with learnable parameters stored at `precision`. Running
    /// statistics stay full32.
    pub fn cast(&self, precision: Precision) -> TrainedModel {
        TrainedModel {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(precision),
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Exponential moving average (momentum 0.1) towards biased batch
    /// statistics `(mean, var)` per batchnorm layer.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f32>, Vec<f32>)]) {
        for (rs, (m, v)) in self.bn_running.iter_mut().zip(stats) {
            for (r, b) in rs.mean.iter_mut().zip(m) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in rs.var.iter_mut().zip(v) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor, requires_grad)).collect(),
        }
    }

    /// Runs the network on `x` (`[N, C, H, W]`, any H/W surviving the pools).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, mode: BnMode) -> Result<ModelOutput> {
        let dims = tape.dims(x).to_vec();
        if dims.len() != 4 || dims[1] != self.spec.input.0 {
            return Err(Error::Dimension {
                op: "forward",
                axis: "channels",
                expected: self.spec.input.0,
                actual: dims.get(1).copied().unwrap_or(0),
            });
        }
        let mut p = bound.vars.iter().copied();
        let mut bn_index = 0;
        let mut h = x;
        let mut features = None;
        let mut bn_stats = Vec::new();
        let mut bn_inputs = Vec::new();
        for layer in self.spec.layers() {
            match layer {
                Layer::Conv { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    h = tape.conv2d(h, w, b, 1, CONV_KERNEL / 2)?;
                }
                Layer::BatchNorm { .. } => {
                    let (g, b) = (p.next().unwrap(), p.next().unwrap());
                    let rs = &self.bn_running[bn_index];
                    bn_inputs.push(h);
                    let (y, stats) = tape.batchnorm(h, g, b, (&rs.mean, &rs.var), mode, BN_EPS)?;
                    if let Some(s) = stats {
                        bn_stats.push(s);
                    }
                    bn_index += 1;
                    h = y;
                }
                Layer::Relu => h = tape.relu(h),
                Layer::MaxPool { name } => {
                    let d = tape.dims(h);
                    if kernels::window_out(d[2], 2, 2, 0).is_none() || kernels::window_out(d[3], 2, 2, 0).is_none() {
                        return Err(Error::Resolution {
                            layer: name,
                            height: dims[2],
                            width: dims[3],
                        });
                    }
                    h = tape.max_pool2d(h, 2, 2)?;
                }
                Layer::GlobalAvgPool => {
                    h = tape.global_avg_pool(h)?;
                    features = Some(h);
                }
                Layer::Linear { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    h = tape.linear(h, w, b)?;
                }
            }
        }
        Ok(ModelOutput {
            logits: h,
            features: features.expect("every architecture pools globally"),
            bn_stats,
            bn_inputs,
        })
    }

    /// Forward pass without gradients. Returns logits `[N, classes]` and, in
    /// train mode, the per-layer `(mean, var)` batch statistics.
    pub fn forward_logits(
        &self,
        batch: &Tensor,
        mode: BnMode,
        activations: Precision,
    ) -> Result<(Tensor, Vec<LayerStats>)> {
        let mut tape = Tape::with_precision(activations);
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(batch, false);
        let out = self.forward(&mut tape, &bound, x, mode)?;
        let stats = out
            .bn_stats
            .iter()
            .map(|s| (tape.value(s.mean).to_vec(), tape.value(s.var).to_vec()))
            .collect();
        Ok((tape.tensor(out.logits), stats))
    }

    /// Eval-mode penultimate features `[N, feature_dim]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(batch, false);
        let out = self.forward(&mut tape, &bound, x, BnMode::Eval)?;
        Ok(tape.tensor(out.features))
    }

    /// Eval-mode class predictions for the whole dataset, in chunks.
    pub fn predict(&self, ds: &LabeledDataset, chunk: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let (logits, _) = self.forward_logits(&ds.batch(part), BnMode::Eval, Precision::Full32)?;
            preds.extend(argmax_rows(&logits.values(), self.spec.num_classes));
        }
        Ok(preds)
    }

    /// Per-layer statistics of each batchnorm input over the whole dataset,
    /// with the network in eval mode.
    pub fn dataset_bn_statistics(&self, ds: &LabeledDataset, chunk: usize) -> Result<Vec<RunningStats>> {
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> = self
            .bn_running
            .iter()
            .map(|r| (vec![0.0; r.mean.len()], vec![0.0; r.mean.len()]))
            .collect();
        let mut counts = vec![0usize; sums.len()];
        let idx: Vec<usize> = (0..ds.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.leaf(&ds.batch(part), false);
            let out = self.forward(&mut tape, &bound, x, BnMode::Eval)?;
            for (layer, &v) in out.bn_inputs.iter().enumerate() {
                let d = tape.dims(v);
                let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
                let xs = tape.value(v);
                for b in 0..n {
                    for ch in 0..c {
                        for &val in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            sums[layer].0[ch] += val as f64;
                            sums[layer].1[ch] += (val as f64) * (val as f64);
                        }
                    }
                }
                counts[layer] += n * hw;
            }
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|((s, sq), n)| {
                let n = n.max(1) as f64;
                let mean: Vec<f32> = s.iter().map(|v| (v / n) as f32).collect();
                let var = s
                    .iter()
                    .zip(&sq)
                    .map(|(a, b)| (b / n - (a / n) * (a / n)).max(0.0) as f32)
                    .collect();
                RunningStats { mean, var }
            })
            .collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let manifest = CheckpointManifest {
            spec: self.spec,
            provenance: self.provenance.clone(),
            seed: self.provenance.seed,
            precision: self.param_precision(),
            params: self.params.iter().map(|p| p.name.clone()).collect(),
            bn_layers: self.bn_layer_names(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        for p in &self.params {
            p.tensor.save(tdir.join(format!("{}.fdrt", p.name)))?;
        }
        for (name, rs) in manifest.bn_layers.iter().zip(&self.bn_running) {
            let c = rs.mean.len();
            Tensor::new(vec![c], rs.mean.clone())?.save(tdir.join(format!("{name}.running_mean.fdrt")))?;
            Tensor::new(vec![c], rs.var.clone())?.save(tdir.join(format!("{name}.running_var.fdrt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let template = build_model(manifest.spec, 0)?;
        if template.params.iter().map(|p| &p.name).ne(manifest.params.iter()) {
            return Err(Error::Spec(format!("{}: parameter list does not match {}", dir.display(), manifest.spec.arch)));
        }
        let tdir = dir.join("tensors");
        let mut params = Vec::with_capacity(template.params.len());
        for p in &template.params {
            let t = Tensor::load(tdir.join(format!("{}.fdrt", p.name)))?;
            if t.dims() != p.tensor.dims() {
                return Err(Error::Spec(format!("{}: tensor {} has dims {:?}", dir.display(), p.name, t.dims())));
            }
            params.push(Param {
                name: p.name.clone(),
                tensor: t,
            });
        }
        let mut bn_running = Vec::new();
        for name in &manifest.bn_layers {
            let mean = Tensor::load(tdir.join(format!("{name}.running_mean.fdrt")))?.to_vec();
            let var = Tensor::load(tdir.join(format!("{name}.running_var.fdrt")))?.to_vec();
            bn_running.push(RunningStats { mean, var });
        }
        if bn_running.len() != template.bn_running.len() {
            return Err(Error::Spec(format!("{}: wrong number of batchnorm layers", dir.display())));
        }
        Ok(TrainedModel {
            spec: manifest.spec,
            params,
            bn_running,
            provenance: manifest.provenance,
        })
    }

    fn bn_layer_names(&self) -> Vec<String> {
        self.spec
            .layers()
            .into_iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { name, .. } => Some(name),
                _ => None,
            })
            .collect()
    }

    /// SHA-256 over spec, parameters and running statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(p.tensor.to_fdrt_bytes());
        }
        for rs in &self.bn_running {
            for v in rs.mean.iter().chain(&rs.var) {
                h.update(v.to_le_bytes());
            }
        }
        data::hex(&h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    provenance: Provenance,
    seed: u64,
    precision: Precision,
    params: Vec<String>,
    bn_layers: Vec<String>,
}

pub fn argmax_rows(values: &[f32], classes: usize) -> Vec<usize> {
    values
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy of eval-mode predictions.
pub fn evaluate(model: &TrainedModel, testset: &LabeledDataset) -> Result<f32> {
    if testset.is_empty() {
        return Ok(0.0);
    }
    let preds = model.predict(testset, 256)?;
    let correct = preds.iter().zip(&testset.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f32 / testset.len() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Zero-padding for the random-crop augmentation; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            crop_pad: 4,
            flip: true,
            seed: 0,
        }
    }
}

/// Cosine-annealed multiplier `0.5 (1 + cos(pi * step / horizon))`.
pub fn cosine_factor(step: usize, horizon: usize) -> f32 {
    if horizon == 0 {
        return 1.0;
    }
    let t = (step as f64 / horizon as f64).min(1.0);
    (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// SGD with momentum and weight decay, cosine-annealed per epoch, random crop
/// and flip augmentation; batchnorm running statistics track the (biased)
/// batch statistics with momentum 0.1.
pub fn pretrain(
    model: &TrainedModel,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    hyper: &PretrainHyper,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::contract("pretraining on an empty dataset"));
    }
    if train.num_classes != model.spec.num_classes {
        return Err(Error::contract(format!(
            "dataset has {} classes, model expects {}",
            train.num_classes, model.spec.num_classes
        )));
    }
    if hyper.batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let mut model = model.cast(Precision::Full32);
    let mut velocity: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
    let mut rng = rng::stream(hyper.seed, &[0x9e7a]);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..hyper.epochs {
        let lr = hyper.lr * cosine_factor(epoch, hyper.epochs);
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = train.batch(chunk);
            if hyper.crop_pad > 0 || hyper.flip {
                batch = if hyper.crop_pad > 0 {
                    data::random_crop_flip(&batch, hyper.crop_pad, &mut rng)
                } else {
                    flip_only(&batch, &mut rng)
                };
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.leaf(&batch, false);
            let out = model.forward(&mut tape, &bound, x, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::contract(format!("pretraining diverged at epoch {epoch}")));
            }
            let stats: Vec<(Vec<f32>, Vec<f32>)> = out
                .bn_stats
                .iter()
                .map(|s| (tape.value(s.mean).to_vec(), tape.value(s.var).to_vec()))
                .collect();
            let mut grads = tape.backward(loss)?;
            for ((p, var), vel) in model.params.iter_mut().zip(bound.vars()).zip(velocity.iter_mut()) {
                let g = grads.take_grad(*var).expect("parameter leaves track gradients");
                let data = p.tensor.data_mut().expect("full32 parameters");
                for ((w, v), gi) in data.iter_mut().zip(vel.iter_mut()).zip(&g) {
                    *v = hyper.momentum * *v + gi + hyper.weight_decay * *w;
                    *w -= lr * *v;
                }
            }
            model.update_running_stats(&stats);
        }
    }

    model.provenance = Provenance {
        dataset_id: train.name.clone(),
        epochs: hyper.epochs,
        train_accuracy: Some(evaluate(&model, train)?),
        test_accuracy: test.map(|t| evaluate(&model, t)).transpose()?,
        seed: hyper.seed,
    };
    Ok(model)
}

fn flip_only(batch: &Tensor, rng: &mut rng::Rng) -> Tensor {
    let d = batch.dims().to_vec();
    let (n, per, w) = (d[0], d[1] * d[2] * d[3], d[3]);
    let mut v = batch.to_vec();
    for s in 0..n {
        if rng.gen_bool(0.5) {
            for row in v[s * per..(s + 1) * per].chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::new(d, v).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_s() -> ModelSpec {
        ModelSpec::new(Arch::CnnS, (3, 32, 32), 10)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(spec_s(), 11).unwrap();
        let b = build_model(spec_s(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_model(spec_s(), 12).unwrap());
    }

    #[test]
    fn parameter_inventory_matches_hand_count() {
        let m = build_model(spec_s(), 0).unwrap();
        // conv1: 16*3*9 + 16, bn1: 2*16, conv2: 32*16*9 + 32, bn2: 2*32, fc: 10*32 + 10
        let expected = (16 * 27 + 16) + 32 + (32 * 144 + 32) + 64 + (320 + 10);
        assert_eq!(m.param_count(), expected);
        assert!(m.bn_running.len() >= 2);
        for arch in Arch::ALL {
            assert!(ModelSpec::new(arch, (3, 32, 32), 8).bn_layer_count() >= 2);
        }
    }

    #[test]
    fn zero_input_gives_linear_bias() {
        let m = build_model(spec_s(), 5).unwrap();
        let (logits, stats) = m
            .forward_logits(&Tensor::zeros(&[2, 3, 32, 32]), BnMode::Eval, Precision::Full32)
            .unwrap();
        assert!(stats.is_empty());
        let bias = m.param("fc.bias").unwrap().to_vec();
        for row in logits.values().chunks(10) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn indivisible_input_is_a_spec_error() {
        let spec = ModelSpec::new(Arch::CnnM, (3, 30, 30), 10);
        assert!(matches!(build_model(spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn both_resolutions_share_the_head() {
        for arch in Arch::ALL {
            let m = build_model(ModelSpec::new(arch, (3, 32, 32), 8), 1).unwrap();
            for side in [24, 32] {
                let (logits, stats) = m
                    .forward_logits(&Tensor::full(&[2, 3, side, side], 0.3), BnMode::Train, Precision::Full32)
                    .unwrap();
                assert_eq!(logits.dims(), &[2, 8]);
                assert_eq!(stats.len(), m.spec.bn_layer_count());
            }
        }
    }

    #[test]
    fn collapsing_resolution_names_the_layer() {
        let m = build_model(ModelSpec::new(Arch::CnnM, (3, 32, 32), 8), 1).unwrap();
        match m.forward_logits(&Tensor::zeros(&[1, 3, 4, 4]), BnMode::Eval, Precision::Full32) {
            Err(Error::Resolution { layer, .. }) => assert_eq!(layer, "pool3"),
            other => panic!("expected resolution error, got {other:?}"),
        }
    }

    #[test]
    fn half_params_halve_bytes() {
        let m = build_model(spec_s(), 2).unwrap();
        let h = m.cast(Precision::Half16);
        assert_eq!(h.param_bytes() * 2, m.param_bytes());
        assert_eq!(h.param_precision(), Precision::Half16);
        assert_eq!(h.bn_running, m.bn_running);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let m = build_model(spec_s(), 3).unwrap();
        let d = tempfile::tempdir().unwrap();
        let (a, b) = (d.path().join("a"), d.path().join("b"));
        m.save(&a).unwrap();
        let loaded = TrainedModel::load(&a).unwrap();
        assert_eq!(loaded, m);
        loaded.save(&b).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?}");
        }
        assert!(a.join("tensors/bn1.running_var.fdrt").exists());
        assert!(a.join("tensors/conv1.weight.fdrt").exists());
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (train, _) = data::gen_synthetic(
            0,
            data::SyntheticSpec {
                num_classes: 4,
                per_class: 10,
                size: 16,
            },
        )
        .unwrap();
        let m = build_model(ModelSpec::new(Arch::CnnS, (3, 16, 16), 4), 0).unwrap();
        let hyper = PretrainHyper {
            epochs: 0,
            ..Default::default()
        };
        let out = pretrain(&m, &train, None, &hyper).unwrap();
        assert_eq!(out.params, m.params);
        assert_eq!(out.bn_running, m.bn_running);
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let (train, _) = data::gen_synthetic(
            0,
            data::SyntheticSpec {
                num_classes: 4,
                per_class: 10,
                size: 16,
            },
        )
        .unwrap();
        let empty = LabeledDataset::new(
            "empty",
            Tensor::zeros(&[0, 3, 16, 16]),
            vec![],
            4,
            data::Split::Train,
            train.normalization.clone(),
        )
        .unwrap();
        let m = build_model(ModelSpec::new(Arch::CnnS, (3, 16, 16), 4), 0).unwrap();
        assert!(matches!(
            pretrain(&m, &empty, None, &PretrainHyper::default()),
            Err(Error::Contract(_))
        ));
    }
}
