//! One-step lookahead meta-gradients for learning-rate multipliers.
//!
//! A train batch is used to write the next parameters as an explicit
//! function of the data parameters,
//!
//! ```text
//! theta'(w, wd) = theta - (lr / B) * sum_i w_eff(i) * g_i - lr * wd * theta
//! ```
//!
//! and the meta loss on a clean batch at `theta'` is differentiated through
//! that single step. Because `theta'` is linear in every multiplier the
//! resulting derivatives are exact dot products:
//!
//! * instance `i`: `-(lr / B) <G, g_i>`
//! * class `c`:    `-(lr * n_c / B) <G, mean_{y_i = c} g_i>`
//! * weight decay: `-lr <G, theta>`
//!
//! where `G` is the meta-batch gradient at `theta'`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_params::{DataParamState, WeightMode};
use crate::error::{Error, Result};
use crate::losses::LossSelector;
use crate::nn::{per_sample_backward, Batch, ParamVector, PerSampleGrads};

/// Rates driving one meta step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRates {
    /// Model learning rate.
    pub lr: f64,
    /// Learning rate of the instance or class multipliers.
    pub lr_data: f64,
    /// Learning rate of the weight-decay coefficient.
    pub lr_wd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub rollout_theta: ParamVector,
    pub meta_loss: f64,
    pub per_instance_metagrad: BTreeMap<usize, f64>,
    pub per_class_metagrad: BTreeMap<usize, f64>,
    pub wd_metagrad: f64,
    pub clamp_count: usize,
}

/// Multiplier of each batch row under the current mode.
pub fn effective_weights(batch: &Batch, dps: &DataParamState) -> Vec<f64> {
    batch
        .indices
        .iter()
        .zip(&batch.labels)
        .map(|(&i, &y)| dps.effective_weight(i, y))
        .collect()
}

/// `theta - (lr/B) sum_i w_i g_i - lr * lambda_wd * theta` over precomputed
/// per-sample gradients.
pub fn rollout_from_grads(
    theta: &ParamVector,
    grads: &PerSampleGrads,
    weights: &[f64],
    lambda_wd: f64,
    lr: f64,
) -> Result<ParamVector> {
    if grads.cols() != theta.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            got: grads.cols(),
        });
    }
    if weights.len() != grads.rows() {
        return Err(Error::LengthMismatch {
            expected: grads.rows(),
            got: weights.len(),
        });
    }
    let scale = lr / grads.rows() as f64;
    let sum = grads.weighted_sum(weights);
    let next: Vec<f64> = theta
        .values()
        .iter()
        .zip(&sum)
        .map(|(t, s)| t - scale * s - lr * lambda_wd * t)
        .collect();
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStep {
            step: 0,
            context: format!("rollout parameter {i}"),
        });
    }
    theta.with_values(next)
}

/// One weighted SGD step of `theta` on `batch`.
pub fn rollout_one_step(
    theta: &ParamVector,
    batch: &Batch,
    dps: &DataParamState,
    lr: f64,
) -> Result<ParamVector> {
    let out = per_sample_backward(theta, batch, LossSelector::PlainCe, dps)?;
    rollout_from_grads(theta, &out.grads, &effective_weights(batch, dps), dps.lambda_wd, lr)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dL_meta / dw_inst[i] = -(lr/B) <meta_grad, g_i>` for each batch row.
pub fn instance_metagrad(
    train_grads: &PerSampleGrads,
    indices: &[usize],
    meta_grad: &[f64],
    lr: f64,
) -> Result<BTreeMap<usize, f64>> {
    if train_grads.cols() != meta_grad.len() {
        return Err(Error::LengthMismatch {
            expected: train_grads.cols(),
            got: meta_grad.len(),
        });
    }
    if indices.len() != train_grads.rows() {
        return Err(Error::LengthMismatch {
            expected: train_grads.rows(),
            got: indices.len(),
        });
    }
    let scale = lr / train_grads.rows() as f64;
    Ok(train_grads
        .iter_rows()
        .zip(indices)
        .map(|(g, &i)| (i, -scale * dot(meta_grad, g)))
        .collect())
}

/// `dL_meta / dw_class[c] = -(lr n_c / B) <meta_grad, mean_{y_i=c} g_i>` for
/// every class present in the batch.
pub fn class_metagrad(
    train_grads: &PerSampleGrads,
    labels: &[usize],
    n_classes: usize,
    meta_grad: &[f64],
    lr: f64,
) -> Result<BTreeMap<usize, f64>> {
    if train_grads.cols() != meta_grad.len() {
        return Err(Error::LengthMismatch {
            expected: train_grads.cols(),
            got: meta_grad.len(),
        });
    }
    if labels.len() != train_grads.rows() {
        return Err(Error::LengthMismatch {
            expected: train_grads.rows(),
            got: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: n_classes,
        });
    }
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let b = train_grads.rows() as f64;
    Ok(present
        .into_iter()
        .map(|c| {
            let mask: Vec<f64> = labels.iter().map(|&y| if y == c { 1.0 } else { 0.0 }).collect();
            let n_c: f64 = mask.iter().sum();
            let mut mean = train_grads.weighted_sum(&mask);
            mean.iter_mut().for_each(|v| *v /= n_c);
            (c, -(lr * n_c / b) * dot(meta_grad, &mean))
        })
        .collect())
}

/// `dL_meta / d lambda_wd = -lr <meta_grad, theta>`, `theta` pre-step.
pub fn wd_metagrad(theta: &ParamVector, meta_grad: &[f64], lr: f64) -> Result<f64> {
    if theta.len() != meta_grad.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            got: meta_grad.len(),
        });
    }
    let g = -lr * dot(meta_grad, theta.values());
    if !g.is_finite() {
        return Err(Error::NonFiniteStep {
            step: 0,
            context: "weight-decay meta-gradient".into(),
        });
    }
    Ok(g)
}

/// Plain SGD on the data parameters, clamped at zero. Only entries named in
/// the report move. Returns the updated state and the number of clamps.
pub fn apply_data_param_update(
    dps: &DataParamState,
    report: &MetaStepReport,
    lr_data: f64,
    lr_wd: f64,
) -> (DataParamState, usize) {
    let mut next = dps.clone();
    let mut clamps = 0;
    let mut descend = |w: &mut f64, g: f64| {
        let v = *w - lr_data * g;
        if v < 0.0 {
            clamps += 1;
            *w = 0.0;
        } else {
            *w = v;
        }
    };
    match dps.mode {
        WeightMode::Instance => {
            for (&i, &g) in &report.per_instance_metagrad {
                descend(&mut next.w_inst[i], g);
            }
        }
        WeightMode::Class => {
            for (&c, &g) in &report.per_class_metagrad {
                descend(&mut next.w_class[c], g);
            }
        }
        WeightMode::None => {}
    }
    if dps.wd_learnable {
        let v = dps.lambda_wd - lr_wd * report.wd_metagrad;
        if v < 0.0 {
            clamps += 1;
            next.lambda_wd = 0.0;
        } else {
            next.lambda_wd = v;
        }
    }
    (next, clamps)
}

/// Meta loss and its parameter gradient on `meta_batch` at `theta`.
pub fn meta_loss_and_grad(theta: &ParamVector, meta_batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let out = per_sample_backward(theta, meta_batch, LossSelector::PlainCe, &DataParamState::empty())?;
    let loss = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
    Ok((loss, out.grads.mean()))
}

/// One iteration of the learning loop: rollout on the train batch, meta
/// gradient at the rolled-out parameters, data-parameter update, commit.
///
/// The committed parameters are the rollout itself. With `history_reset`
/// the rollout always uses unit multipliers; the model then takes the step
/// with the freshly updated multipliers and those are reset to 1.
pub fn meta_train_step(
    theta: &ParamVector,
    dps: &DataParamState,
    train_batch: &Batch,
    meta_batch: &Batch,
    rates: MetaRates,
    n_classes: usize,
) -> Result<(ParamVector, DataParamState, MetaStepReport)> {
    if train_batch.len() != meta_batch.len() {
        return Err(Error::Contract(format!(
            "train batch has {} rows but meta batch has {}",
            train_batch.len(),
            meta_batch.len()
        )));
    }
    let mut start = dps.clone();
    if start.history_reset {
        start.reset_weights();
    }

    let train = per_sample_backward(theta, train_batch, LossSelector::PlainCe, &start)?;
    let weights = effective_weights(train_batch, &start);
    let rollout = rollout_from_grads(theta, &train.grads, &weights, start.lambda_wd, rates.lr)?;
    let (meta_loss, meta_grad) = meta_loss_and_grad(&rollout, meta_batch)?;

    let per_instance = match start.mode {
        WeightMode::None => BTreeMap::new(),
        _ => instance_metagrad(&train.grads, &train_batch.indices, &meta_grad, rates.lr)?,
    };
    let per_class = match start.mode {
        WeightMode::Class => {
            class_metagrad(&train.grads, &train_batch.labels, n_classes, &meta_grad, rates.lr)?
        }
        _ => BTreeMap::new(),
    };
    let wd_grad = wd_metagrad(theta, &meta_grad, rates.lr)?;

    let mut report = MetaStepReport {
        rollout_theta: rollout,
        meta_loss,
        per_instance_metagrad: per_instance,
        per_class_metagrad: per_class,
        wd_metagrad: wd_grad,
        clamp_count: 0,
    };
    let (mut next, clamps) = apply_data_param_update(&start, &report, rates.lr_data, rates.lr_wd);
    report.clamp_count = clamps;

    let theta_next = if start.history_reset && start.mode != WeightMode::None {
        let w = effective_weights(train_batch, &next);
        let committed = rollout_from_grads(theta, &train.grads, &w, next.lambda_wd, rates.lr)?;
        next.reset_weights();
        committed
    } else {
        report.rollout_theta.clone()
    };
    Ok((theta_next, next, report))
}

/// Frozen multipliers for one epoch of a replayed schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSchedule {
    /// Instance multipliers; missing entries are 1.
    pub w_inst: BTreeMap<usize, f64>,
    pub w_class: Vec<f64>,
    pub lambda_wd: f64,
}

impl FrozenSchedule {
    pub fn weight(&self, mode: WeightMode, index: usize, label: usize) -> f64 {
        match mode {
            WeightMode::Instance => self.w_inst.get(&index).copied().unwrap_or(1.0),
            WeightMode::Class => self.w_class.get(label).copied().unwrap_or(1.0),
            WeightMode::None => 1.0,
        }
    }
}

/// The multipliers recorded for `epoch`, to be used without a meta set.
pub fn replay_schedule(
    trajectory: &crate::harness::TrajectoryLog,
    epoch: usize,
) -> Result<FrozenSchedule> {
    let snap = trajectory.epochs.get(epoch).ok_or(Error::IndexOutOfRange {
        index: epoch,
        len: trajectory.epochs.len(),
    })?;
    Ok(FrozenSchedule {
        w_inst: snap.w_inst.clone(),
        w_class: snap.w_class.clone(),
        lambda_wd: snap.lambda_wd,
    })
}
