//! The per-step recovery objective on synthetic pixels and the Adam update.
//!
//! For each teacher the loss is the batch-mean cross-entropy of its
//! train-mode logits against the target labels plus `lambda` times the
//! divergence between the batch statistics at every batchnorm input and the
//! teacher's running statistics:
//!
//! `d_global = sum_l ||mu_l(x) - running_mean_l||_2 + ||var_l(x) - running_var_l||_2`
//!
//! With several teachers the totals (and gradients) are averaged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::error::{Error, LossTerm, Result};
use crate::model::TrainedModel;
use crate::tensor::{Precision, Tensor};

/// Where reduced precision is allowed. Batch-statistic divergence and the
/// pixel gradients are always full32; there is no way to configure them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    params: Precision,
    logits_and_ce: Precision,
}

impl PrecisionPolicy {
    pub fn new(params: Precision, logits_and_ce: Precision) -> Self {
        PrecisionPolicy { params, logits_and_ce }
    }

    pub fn full32() -> Self {
        Self::new(Precision::Full32, Precision::Full32)
    }

    /// Half16 parameters, logits and cross-entropy.
    pub fn mixed() -> Self {
        Self::new(Precision::Half16, Precision::Half16)
    }

    pub fn params(&self) -> Precision {
        self.params
    }

    pub fn logits_and_ce(&self) -> Precision {
        self.logits_and_ce
    }

    pub fn bn_divergence(&self) -> Precision {
        Precision::Full32
    }

    pub fn pixel_grads(&self) -> Precision {
        Precision::Full32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.25,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step_count: u64,
    /// Learning rate used by the next step; schedules overwrite it.
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(numel: usize, hyper: AdamHyper) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step_count: 0,
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
        }
    }

    /// Zeroes the moments and the step counter, resizing to `numel`.
    pub fn reset(&mut self, numel: usize) {
        self.m = vec![0.0; numel];
        self.v = vec![0.0; numel];
        self.step_count = 0;
    }
}

/// One bias-corrected Adam update applied in place to a flat buffer.
pub fn adam_update(values: &mut [f32], grad: &[f32], state: &mut AdamState) -> Result<()> {
    if values.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Dimension {
            op: "grad_step",
            axis: "numel",
            expected: values.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: LossTerm::Gradient,
            precision: Precision::Full32,
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((x, &g), m), v) in values.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *x -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam step on the synthetic pixels. No clamping is applied.
pub fn grad_step(x: &mut Tensor, grad: &[f32], state: &mut AdamState) -> Result<()> {
    let values = x
        .data_mut()
        .ok_or_else(|| Error::contract("synthetic pixels must be stored full32"))?;
    adam_update(values, grad, state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryLossReport {
    pub total: f32,
    pub ce: f32,
    pub d_global: f32,
    /// `||mu_l - running_mean_l||` per batchnorm layer (teacher-averaged).
    pub mean_residuals: Vec<f32>,
    /// `||var_l - running_var_l||` per batchnorm layer (teacher-averaged).
    pub var_residuals: Vec<f32>,
    pub overflow_count: usize,
}

/// Teachers prepared once for repeated evaluation under a precision policy.
#[derive(Debug, Clone)]
pub struct RecoveryObjective {
    teachers: Vec<TrainedModel>,
    lambda: f32,
    policy: PrecisionPolicy,
}

impl RecoveryObjective {
    pub fn new(teachers: &[TrainedModel], lambda: f32, policy: PrecisionPolicy) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::contract("recovery needs at least one teacher"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::contract(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(RecoveryObjective {
            teachers: teachers.iter().map(|t| t.cast(policy.params())).collect(),
            lambda,
            policy,
        })
    }

    pub fn teachers(&self) -> &[TrainedModel] {
        &self.teachers
    }

    pub fn policy(&self) -> PrecisionPolicy {
        self.policy
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    /// Loss report and the full32 gradient with respect to `x`.
    pub fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<(RecoveryLossReport, Vec<f32>)> {
        let n = x.dims().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::contract(format!("recovery needs a batch of >= 2 images, got {n}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "recovery_loss",
                axis: "labels",
                expected: n,
                actual: labels.len(),
            });
        }
        let teachers = self.teachers.len() as f64;
        let mut grad = vec![0.0f32; x.numel()];
        let (mut ce_sum, mut d_sum) = (0.0f64, 0.0f64);
        let mut mean_res: Vec<f64> = Vec::new();
        let mut var_res: Vec<f64> = Vec::new();
        let mut overflow = 0;

        for teacher in &self.teachers {
            let classes = teacher.spec.num_classes;
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
            }
            let mut tape = Tape::with_precision(self.policy.logits_and_ce());
            let bound = teacher.bind(&mut tape, false);
            let xv = tape.leaf(x, true);
            let out = teacher.forward(&mut tape, &bound, xv, BnMode::Train)?;
            let ce = tape.softmax_cross_entropy(out.logits, labels)?;
            let ce_value = tape.scalar(ce);
            if !ce_value.is_finite() {
                return Err(Error::NonFinite {
                    term: LossTerm::CrossEntropy,
                    precision: self.policy.logits_and_ce(),
                });
            }

            let mut d_terms = Vec::with_capacity(2 * out.bn_stats.len());
            if mean_res.is_empty() {
                mean_res = vec![0.0; out.bn_stats.len()];
                var_res = vec![0.0; out.bn_stats.len()];
            }
            for (l, (stats, running)) in out.bn_stats.iter().zip(&teacher.bn_running).enumerate() {
                let dm = tape.l2_distance(stats.mean, &running.mean)?;
                let dv = tape.l2_distance(stats.var, &running.var)?;
                if l < mean_res.len() {
                    mean_res[l] += tape.scalar(dm) as f64;
                    var_res[l] += tape.scalar(dv) as f64;
                }
                d_terms.push(dm);
                d_terms.push(dv);
            }
            let d_value: f64 = d_terms.iter().map(|&v| tape.scalar(v) as f64).sum();
            if !d_value.is_finite() {
                return Err(Error::NonFinite {
                    term: LossTerm::GlobalStats,
                    precision: self.policy.bn_divergence(),
                });
            }
            ce_sum += ce_value as f64;
            d_sum += d_value;
            overflow += tape.overflow_count();

            let mut total = ce;
            if self.lambda > 0.0 {
                let mut d = d_terms[0];
                for &term in &d_terms[1..] {
                    d = tape.add(d, term)?;
                }
                let weighted = tape.scale(d, self.lambda);
                total = tape.add(ce, weighted)?;
            }
            let grads = tape.backward(total)?;
            let g = grads.grad(xv).expect("pixels track gradients");
            for (acc, &v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }

        if self.teachers.len() > 1 {
            let inv = 1.0 / self.teachers.len() as f32;
            for v in grad.iter_mut() {
                *v *= inv;
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: LossTerm::Gradient,
                precision: self.policy.pixel_grads(),
            });
        }
        let ce = (ce_sum / teachers) as f32;
        let d_global = (d_sum / teachers) as f32;
        let report = RecoveryLossReport {
            total: if self.lambda == 0.0 { ce } else { ce + self.lambda * d_global },
            ce,
            d_global,
            mean_residuals: mean_res.iter().map(|v| (v / teachers) as f32).collect(),
            var_residuals: var_res.iter().map(|v| (v / teachers) as f32).collect(),
            overflow_count: overflow,
        };
        Ok((report, grad))
    }
}

/// One-shot form of [`RecoveryObjective::evaluate`].
pub fn recovery_loss(
    teachers: &[TrainedModel],
    x: &Tensor,
    labels: &[usize],
    lambda: f32,
    policy: PrecisionPolicy,
) -> Result<(RecoveryLossReport, Vec<f32>)> {
    RecoveryObjective::new(teachers, lambda, policy)?.evaluate(x, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub ce: f32,
    pub d_global: f32,
    pub total: f32,
    pub precision_overflow_count: usize,
}

/// Per-step loss trace, written as CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn push(&mut self, step: usize, report: &RecoveryLossReport) {
        self.rows.push(TraceRow {
            step,
            ce: report.ce,
            d_global: report.d_global,
            total: report.total,
            precision_overflow_count: report.overflow_count,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ce,d_global,total,precision_overflow_count\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.ce, r.d_global, r.total, r.precision_overflow_count);
        }
        s
    }

    pub fn overflow_total(&self) -> usize {
        self.rows.iter().map(|r| r.precision_overflow_count).sum()
    }
}
