//! Penalty terms that strategies add to the data loss: quadratic parameter
//! anchoring with a Fisher-diagonal metric, and soft-target distillation
//! against a frozen earlier model. Both are pure functions of their inputs
//! so their gradients can be checked against finite differences directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::Model;
use crate::nn::{softmax_cross_entropy, Parameter, Parameterized};

/// Frozen reference point for one past experience: parameter values at the
/// end of that experience plus the Fisher diagonal estimated there, keyed by
/// parameter id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub entries: BTreeMap<String, AnchorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub theta: Matrix,
    pub fisher: Matrix,
}

/// `(lambda/2) * sum_anchors sum_k F_k (theta_k - theta*_k)^2`.
///
/// Parameters are matched to anchor entries by id. A parameter that has
/// grown since the anchor was taken is penalized only on the overlapping
/// top-left block — new rows and columns carry no anchor and move freely.
/// Parameters with no entry (created after the anchor) are skipped.
pub fn ewc_penalty_over(params: &[&Parameter], anchors: &[EwcAnchor], lambda: f64) -> f64 {
    let mut total = 0.0;
    for anchor in anchors {
        for p in params {
            if let Some(e) = anchor.entries.get(p.id()) {
                let rows = e.theta.rows().min(p.value.rows());
                let cols = e.theta.cols().min(p.value.cols());
                for r in 0..rows {
                    for c in 0..cols {
                        let d = p.value.get(r, c) - e.theta.get(r, c);
                        total += 0.5 * lambda * e.fisher.get(r, c) * d * d;
                    }
                }
            }
        }
    }
    total
}

/// Adds `lambda * F_k (theta_k - theta*_k)` into each parameter's gradient;
/// the exact gradient of [`ewc_penalty_over`].
pub fn ewc_grads_over(params: &mut [&mut Parameter], anchors: &[EwcAnchor], lambda: f64) {
    for p in params.iter_mut() {
        for anchor in anchors {
            if let Some(e) = anchor.entries.get(p.id()) {
                let rows = e.theta.rows().min(p.value.rows());
                let cols = e.theta.cols().min(p.value.cols());
                for r in 0..rows {
                    for c in 0..cols {
                        let d = p.value.get(r, c) - e.theta.get(r, c);
                        let g = p.grad.get(r, c) + lambda * e.fisher.get(r, c) * d;
                        p.grad.set(r, c, g);
                    }
                }
            }
        }
    }
}

pub fn ewc_penalty(model: &Model, anchors: &[EwcAnchor], lambda: f64) -> f64 {
    ewc_penalty_over(&model.params(), anchors, lambda)
}

pub fn ewc_accumulate_grads(model: &mut Model, anchors: &[EwcAnchor], lambda: f64) {
    ewc_grads_over(&mut model.params_mut(), anchors, lambda);
}

/// Empirical Fisher diagonal: mean over the first `fisher_batches`
/// sequential (unshuffled) batches of the squared batch-mean gradient of the
/// cross-entropy loss. Leaves the model's gradients zeroed and advances no
/// RNG, so running it is invisible to the rest of training.
pub fn estimate_fisher(
    model: &mut Model,
    dataset: &Dataset,
    batch_size: usize,
    fisher_batches: usize,
) -> Result<BTreeMap<String, Matrix>> {
    if fisher_batches == 0 {
        return Err(Error::InvalidArgument(
            "fisher estimation needs at least one batch".into(),
        ));
    }
    let mut fisher: BTreeMap<String, Matrix> = model
        .params()
        .iter()
        .map(|p| {
            (
                p.id().to_string(),
                Matrix::zeros(p.value.rows(), p.value.cols()),
            )
        })
        .collect();
    let mut used = 0usize;
    for batch in dataset.batches(batch_size, false, 0)?.take(fisher_batches) {
        model.zero_grads();
        let (logits, cache) = model.forward(&batch)?;
        let (_, d_logits) = softmax_cross_entropy(&logits, &batch.y, None)?;
        model.backward(&cache, &d_logits)?;
        for p in model.params() {
            let f = fisher.get_mut(p.id()).expect("entry per parameter");
            for (fv, &g) in f.data_mut().iter_mut().zip(p.grad.data()) {
                *fv += g * g;
            }
        }
        used += 1;
    }
    model.zero_grads();
    if used == 0 {
        return Err(Error::InvalidArgument(
            "fisher estimation over an empty dataset".into(),
        ));
    }
    for f in fisher.values_mut() {
        for v in f.data_mut() {
            *v /= used as f64;
        }
    }
    Ok(fisher)
}

/// Freezes the model's current parameters together with `fisher` into an
/// anchor. Fisher entries for unknown parameter ids are dropped.
pub fn make_anchor(model: &Model, mut fisher: BTreeMap<String, Matrix>) -> EwcAnchor {
    let mut entries = BTreeMap::new();
    for p in model.params() {
        if let Some(f) = fisher.remove(p.id()) {
            entries.insert(
                p.id().to_string(),
                AnchorEntry {
                    theta: p.value.clone(),
                    fisher: f,
                },
            );
        }
    }
    EwcAnchor { entries }
}

/// Softmax of selected columns at temperature `t`.
fn softmax_selected(row: &[f64], classes: &[usize], t: f64) -> Vec<f64> {
    let mut z: Vec<f64> = classes.iter().map(|&c| row[c] / t).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut z {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut z {
        *v /= sum;
    }
    z
}

/// Distillation penalty `alpha * T^2 * mean_batch KL(p_old || p_new)` with
/// `p = softmax(logits[classes] / T)`, restricted to `rows` (examples the
/// old model can score) and `classes` (the old model's known classes).
///
/// Returns the penalty and its gradient with respect to `new_logits`; the
/// gradient is `alpha * T * (p_new - p_old) / batch_divisor` on the selected
/// entries, zero elsewhere. `batch_divisor` is the full batch size so the
/// penalty averages over the same denominator as the data loss.
pub fn lwf_distillation(
    new_logits: &Matrix,
    old_logits: &Matrix,
    rows: &[usize],
    classes: &[usize],
    alpha: f64,
    temperature: f64,
    batch_divisor: usize,
) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if batch_divisor == 0 {
        return Err(Error::InvalidArgument("batch divisor must be >= 1".into()));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "distillation needs at least one class".into(),
        ));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= old_logits.cols()) {
        return Err(Error::OutOfRange(format!(
            "class {c} outside {} old logit columns",
            old_logits.cols()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= new_logits.cols()) {
        return Err(Error::OutOfRange(format!(
            "class {c} outside {} new logit columns",
            new_logits.cols()
        )));
    }
    if let Some(&r) = rows
        .iter()
        .find(|&&r| r >= new_logits.rows() || r >= old_logits.rows())
    {
        return Err(Error::OutOfRange(format!("row {r} outside logits")));
    }

    let t = temperature;
    let b = batch_divisor as f64;
    let mut d = Matrix::zeros(new_logits.rows(), new_logits.cols());
    let mut kl_sum = 0.0;
    for &r in rows {
        let p_old = softmax_selected(old_logits.row(r), classes, t);
        let p_new = softmax_selected(new_logits.row(r), classes, t);
        for (k, &c) in classes.iter().enumerate() {
            if p_old[k] > 0.0 {
                kl_sum += p_old[k] * (p_old[k].ln() - p_new[k].ln());
            }
            let g = d.get(r, c) + alpha * t * (p_new[k] - p_old[k]) / b;
            d.set(r, c, g);
        }
    }
    Ok((alpha * t * t * kl_sum / b, d))
}
