//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs have smaller indices, so the tape is
//! topologically ordered by construction and `backward` replays it from the
//! loss down to index 0. A tape (and the values on it) is owned by a single
//! job; nothing is shared.

pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{round_to_half, Precision, Tensor};

use kernels::{ConvGeom, PoolGeom};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by the batch statistics and emit them.
    Train,
    /// Normalize by the running statistics.
    Eval,
}

/// Per-channel batch statistics emitted by a train-mode batchnorm. Both are
/// differentiable full32 nodes.
#[derive(Debug, Clone, Copy)]
pub struct BatchStatVars {
    pub mean: Var,
    pub var: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        n: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    ChannelMean {
        x: Var,
    },
    ChannelVar {
        x: Var,
        mean: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
        n: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        logits: Var,
        target: Vec<f32>,
        probs: Vec<f64>,
    },
    L2Distance {
        x: Var,
        target: Vec<f32>,
        norm: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f32>,
    dims: Vec<usize>,
    precision: Precision,
    op: Op,
    requires_grad: bool,
}

/// Gradient of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// The leaf with its gradient slot filled.
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.leaves.get(&var).and_then(|t| t.grad())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.remove(&var)
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f32>> {
        self.leaves.remove(&var).and_then(|mut t| t.take_grad())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    activation_precision: Precision,
    overflow: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose activation ops (conv, batchnorm output, pooling, linear,
    /// losses) narrow their results to `precision`. Statistics, distances and
    /// gradients stay full32.
    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            activation_precision: precision,
            ..Self::default()
        }
    }

    pub fn activation_precision(&self) -> Precision {
        self.activation_precision
    }

    /// Finite values that overflowed to infinity when narrowed.
    pub fn overflow_count(&self) -> usize {
        self.overflow
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: tensor.to_vec(),
            dims: tensor.dims().to_vec(),
            precision: tensor.precision(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &[f32] {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].dims
    }

    pub fn precision(&self, var: Var) -> Precision {
        self.nodes[var.0].precision
    }

    pub fn scalar(&self, var: Var) -> f32 {
        self.nodes[var.0].value[0]
    }

    /// The node value as a tensor in its storage precision.
    pub fn tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor::new(node.dims.clone(), node.value.clone())
            .expect("node dims match value")
            .cast(node.precision)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, mut value: Vec<f32>, dims: Vec<usize>, op: Op, inputs: &[Var], activation: bool) -> Var {
        let precision = if activation {
            self.activation_precision
        } else {
            Precision::Full32
        };
        if precision == Precision::Half16 {
            self.overflow += round_to_half(&mut value);
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        debug_assert_eq!(value.len(), dims.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            dims,
            precision,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn expect_rank(&self, var: Var, rank: usize, op: &'static str) -> Result<&[usize]> {
        let dims = self.dims(var);
        if dims.len() != rank {
            return Err(Error::Dimension {
                op,
                axis: "rank",
                expected: rank,
                actual: dims.len(),
            });
        }
        Ok(dims)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.expect_rank(x, 4, "conv2d")?.to_vec();
        let wd = self.expect_rank(w, 4, "conv2d")?.to_vec();
        let (n, cin, h, wid) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, wcin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if wcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "in_channels",
                expected: cin,
                actual: wcin,
            });
        }
        if self.dims(b) != [cout] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: cout,
                actual: self.dims(b).iter().product(),
            });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        let ho = kernels::window_out(h, kh, stride, pad).ok_or(Error::Dimension {
            op: "conv2d",
            axis: "height",
            expected: kh,
            actual: h + 2 * pad,
        })?;
        let wo = kernels::window_out(wid, kw, stride, pad).ok_or(Error::Dimension {
            op: "conv2d",
            axis: "width",
            expected: kw,
            actual: wid + 2 * pad,
        })?;
        let geom = ConvGeom {
            cin,
            h,
            w: wid,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(self.value(x), n, self.value(w), self.value(b), &geom);
        Ok(self.push(out, vec![n, cout, ho, wo], Op::Conv2d { x, w, b, geom, n }, &[x, w, b], true))
    }

    /// Batch normalization over (N, H, W). In train mode the returned
    /// statistics are separate differentiable nodes computed from `x`; in
    /// eval mode `running` supplies the normalization and no statistics are
    /// returned.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f32], &[f32]),
        mode: BnMode,
        eps: f32,
    ) -> Result<(Var, Option<BatchStatVars>)> {
        let xd = self.expect_rank(x, 4, "batchnorm")?.to_vec();
        let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
        for (var, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.dims(var) != [c] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    axis,
                    expected: c,
                    actual: self.dims(var).iter().product(),
                });
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm",
                axis: "running_stats",
                expected: c,
                actual: running.0.len().min(running.1.len()),
            });
        }
        if n * hw == 0 {
            return Err(Error::contract("batchnorm needs N*H*W >= 1"));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract("batchnorm eps must be positive"));
        }
        let (mean, var) = match mode {
            BnMode::Train => kernels::channel_stats(self.value(x), n, c, hw),
            BnMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0f32; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is, gm, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                    *o = gm * ((v - mu) * is) + bb;
                }
            }
        }
        let batch_stats = mode == BnMode::Train;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            inv_std,
            batch_stats,
        };
        let y = self.push(out, xd, op, &[x, gamma, beta], true);
        let stats = if batch_stats {
            let m = self.push(mean.clone(), vec![c], Op::ChannelMean { x }, &[x], false);
            let v = self.push(var, vec![c], Op::ChannelVar { x, mean }, &[x], false);
            Some(BatchStatVars { mean: m, var: v })
        } else {
            None
        };
        Ok((y, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let dims = self.dims(x).to_vec();
        self.push(out, dims, Op::Relu { x }, &[x], true)
    }

    fn pool_geom(&self, x: Var, k: usize, stride: usize, op: &'static str) -> Result<(usize, PoolGeom)> {
        let xd = self.expect_rank(x, 4, op)?;
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        if stride == 0 {
            return Err(Error::contract(format!("{op} stride must be >= 1")));
        }
        let ho = kernels::window_out(h, k, stride, 0).ok_or(Error::Dimension {
            op,
            axis: "height",
            expected: k,
            actual: h,
        })?;
        let wo = kernels::window_out(w, k, stride, 0).ok_or(Error::Dimension {
            op,
            axis: "width",
            expected: k,
            actual: w,
        })?;
        Ok((
            n,
            PoolGeom {
                c,
                h,
                w,
                k,
                stride,
                ho,
                wo,
            },
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, g) = self.pool_geom(x, k, stride, "max_pool2d")?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x), n, &g);
        Ok(self.push(out, vec![n, g.c, g.ho, g.wo], Op::MaxPool { x, argmax }, &[x], true))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, g) = self.pool_geom(x, k, stride, "avg_pool2d")?;
        let out = kernels::avg_pool_forward(self.value(x), n, &g);
        Ok(self.push(out, vec![n, g.c, g.ho, g.wo], Op::AvgPool { x, geom: g, n }, &[x], true))
    }

    /// [N, C, H, W] -> [N, C] by averaging each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xd = self.expect_rank(x, 4, "global_avg_pool")?.to_vec();
        let hw = xd[2] * xd[3];
        if hw == 0 {
            return Err(Error::contract("global_avg_pool over an empty plane"));
        }
        let out = self
            .value(x)
            .chunks_exact(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Ok(self.push(out, vec![xd[0], xd[1]], Op::GlobalAvgPool { x }, &[x], true))
    }

    /// [N, ...] -> [N, prod(...)].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        let n = *xd.first().ok_or_else(|| Error::contract("flatten of a scalar"))?;
        let rest = xd[1..].iter().product();
        let out = self.value(x).to_vec();
        Ok(self.push(out, vec![n, rest], Op::Reshape { x }, &[x], true))
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.expect_rank(x, 2, "linear")?.to_vec();
        let wd = self.expect_rank(w, 2, "linear")?.to_vec();
        let (n, fin) = (xd[0], xd[1]);
        let fout = wd[0];
        if wd[1] != fin {
            return Err(Error::Dimension {
                op: "linear",
                axis: "in_features",
                expected: fin,
                actual: wd[1],
            });
        }
        if self.dims(b) != [fout] {
            return Err(Error::Dimension {
                op: "linear",
                axis: "bias",
                expected: fout,
                actual: self.dims(b).iter().product(),
            });
        }
        let bias = self.value(b);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        kernels::gemm(n, fin, fout, self.value(x), fin as isize, 1, self.value(w), 1, fin as isize, 1.0, &mut out);
        Ok(self.push(out, vec![n, fout], Op::Linear { x, w, b }, &[x, w, b], true))
    }

    /// Batch-mean cross-entropy of `softmax(logits)` against hard labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ld = self.expect_rank(logits, 2, "softmax_cross_entropy")?.to_vec();
        let (n, classes) = (ld[0], ld[1]);
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                axis: "batch",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let logp = kernels::log_softmax_rows(self.value(logits), classes);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp[i * classes + y])
            .sum::<f64>()
            / n as f64;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![loss as f32], vec![], op, &[logits], true))
    }

    /// Batch-mean `KL(target || softmax(logits))` for row-stochastic targets.
    pub fn kl_divergence(&mut self, logits: Var, target: &[f32]) -> Result<Var> {
        let ld = self.expect_rank(logits, 2, "kl_divergence")?.to_vec();
        let (n, classes) = (ld[0], ld[1]);
        if target.len() != n * classes {
            return Err(Error::Dimension {
                op: "kl_divergence",
                axis: "target",
                expected: n * classes,
                actual: target.len(),
            });
        }
        let logp = kernels::log_softmax_rows(self.value(logits), classes);
        let mut loss = 0.0f64;
        for (&q, &lp) in target.iter().zip(&logp) {
            if q > 0.0 {
                loss += q as f64 * ((q as f64).ln() - lp);
            }
        }
        loss /= n as f64;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let op = Op::KlDivergence {
            logits,
            target: target.to_vec(),
            probs,
        };
        Ok(self.push(vec![loss as f32], vec![], op, &[logits], true))
    }

    /// Euclidean norm `||x - target||_2` as a full32 scalar.
    pub fn l2_distance(&mut self, x: Var, target: &[f32]) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != target.len() {
            return Err(Error::Dimension {
                op: "l2_distance",
                axis: "numel",
                expected: xs.len(),
                actual: target.len(),
            });
        }
        let norm = xs
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let op = Op::L2Distance {
            x,
            target: target.to_vec(),
            norm,
        };
        Ok(self.push(vec![norm as f32], vec![], op, &[x], false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension {
                op: "add",
                axis: "numel",
                expected: self.value(a).len(),
                actual: self.value(b).len(),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(out, dims, Op::Add { a, b }, &[a, b], false))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let dims = self.dims(x).to_vec();
        self.push(out, dims, Op::Scale { x, factor }, &[x], false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>();
        self.push(vec![s as f32], vec![], Op::Sum { x }, &[x], false)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape and returns
    /// every gradient-tracking leaf with its full32 gradient slot filled.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let mut t = Tensor::new(node.dims.clone(), node.value.clone())?.cast(node.precision);
                    t.set_grad(g)?;
                    leaves.insert(Var(idx), t);
                }
                Op::Conv2d { x, w, b, geom, n } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        *n,
                        self.value(*w),
                        &g,
                        geom,
                        self.needs(*x),
                        self.needs(*w),
                        self.needs(*b),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xd = self.dims(*x);
                    let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let m = (n * hw) as f64;
                    let xs = self.value(*x);
                    let gm = self.value(*gamma);
                    let mut sum_dy = vec![0.0f64; c];
                    let mut sum_dy_xhat = vec![0.0f64; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                let xhat = ((xs[i] - mean[ch]) * inv_std[ch]) as f64;
                                sum_dy[ch] += g[i] as f64;
                                sum_dy_xhat[ch] += g[i] as f64 * xhat;
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0f32; xs.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let scale = gm[ch] * inv_std[ch];
                                if *batch_stats {
                                    let k = scale as f64 / m;
                                    for i in off..off + hw {
                                        let xhat = ((xs[i] - mean[ch]) * inv_std[ch]) as f64;
                                        dx[i] = (k * (m * g[i] as f64 - sum_dy[ch] - xhat * sum_dy_xhat[ch])) as f32;
                                    }
                                } else {
                                    for i in off..off + hw {
                                        dx[i] = g[i] * scale;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Some(dx));
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, Some(sum_dy_xhat.iter().map(|&v| v as f32).collect()));
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, Some(sum_dy.iter().map(|&v| v as f32).collect()));
                    }
                }
                Op::ChannelMean { x } => {
                    let xd = self.dims(*x);
                    let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let inv = 1.0 / (n * hw) as f32;
                    let mut dx = vec![0.0f32; n * c * hw];
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d = g[(i / hw) % c] * inv;
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::ChannelVar { x, mean } => {
                    let xd = self.dims(*x);
                    let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let k = 2.0 / (n * hw) as f32;
                    let xs = self.value(*x);
                    let dx = xs
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let ch = (i / hw) % c;
                            g[ch] * k * (v - mean[ch])
                        })
                        .collect();
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Relu { x } => {
                    let dx = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0f32; self.value(*x).len()];
                    for (&i, &d) in argmax.iter().zip(&g) {
                        dx[i as usize] += d;
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::AvgPool { x, geom, n } => {
                    accumulate(&mut grads, *x, Some(kernels::avg_pool_backward(&g, *n, geom)));
                }
                Op::GlobalAvgPool { x } => {
                    let xd = self.dims(*x);
                    let hw = xd[2] * xd[3];
                    let inv = 1.0 / hw as f32;
                    let dx = (0..self.value(*x).len()).map(|i| g[i / hw] * inv).collect();
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, Some(g)),
                Op::Linear { x, w, b } => {
                    let xd = self.dims(*x);
                    let (n, fin) = (xd[0], xd[1]);
                    let fout = self.dims(*w)[0];
                    if self.needs(*x) {
                        let mut dx = vec![0.0f32; n * fin];
                        // dx[n,in] = dy[n,out] * W[out,in]
                        kernels::gemm(n, fout, fin, &g, fout as isize, 1, self.value(*w), fin as isize, 1, 0.0, &mut dx);
                        accumulate(&mut grads, *x, Some(dx));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0f32; fout * fin];
                        // dW[out,in] = dy^T[out,n] * x[n,in]
                        kernels::gemm(fout, n, fin, &g, 1, fout as isize, self.value(*x), fin as isize, 1, 0.0, &mut dw);
                        accumulate(&mut grads, *w, Some(dw));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0f32; fout];
                        for row in g.chunks_exact(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Some(db));
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let classes = probs.len() / n;
                    let k = g[0] as f64 / n as f64;
                    let mut dl: Vec<f32> = probs.iter().map(|&p| (p * k) as f32).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * classes + y] -= k as f32;
                    }
                    accumulate(&mut grads, *logits, Some(dl));
                }
                Op::KlDivergence { logits, target, probs } => {
                    let n = self.dims(*logits)[0];
                    let k = g[0] as f64 / n as f64;
                    let dl = probs
                        .iter()
                        .zip(target)
                        .map(|(&p, &q)| ((p - q as f64) * k) as f32)
                        .collect();
                    accumulate(&mut grads, *logits, Some(dl));
                }
                Op::L2Distance { x, target, norm } => {
                    let dx = if *norm > 0.0 {
                        let k = g[0] as f64 / norm;
                        self.value(*x)
                            .iter()
                            .zip(target)
                            .map(|(&a, &b)| ((a as f64 - b as f64) * k) as f32)
                            .collect()
                    } else {
                        vec![0.0; target.len()]
                    };
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, Some(g.clone()));
                    }
                    accumulate(&mut grads, *b, Some(g));
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, Some(g.iter().map(|v| v * factor).collect()));
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, Some(vec![g[0]; n]));
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, delta: Option<Vec<f32>>) {
    let Some(delta) = delta else { return };
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
