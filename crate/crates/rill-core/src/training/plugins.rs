//! The concrete strategy behaviors: joint retraining over all seen data,
//! balanced rehearsal from a bounded memory, quadratic parameter anchoring,
//! and distillation against the previous model.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CallbackPoint, Plugin, StrategyState};
use crate::buffers::{BufferPolicy, ExemplarsBuffer, StoragePolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Head, Model};
use crate::training::regularizers::{
    estimate_fisher, ewc_accumulate_grads, ewc_penalty, lwf_distillation, make_anchor, EwcAnchor,
};

/// Retrains on the concatenation of every experience seen so far. The
/// upper-bound reference strategy: unbounded memory, no forgetting.
pub struct CumulativePlugin;

impl Plugin for CumulativePlugin {
    fn name(&self) -> &'static str {
        "cumulative"
    }

    fn dataset_adaptation(&mut self, state: &mut StrategyState) -> Result<()> {
        // History already includes the current experience at this point.
        state.adapted_dataset = Some(Dataset::concat(&state.history)?);
        Ok(())
    }
}

/// Rehearsal: keeps a bounded exemplar memory and trains each experience on
/// balanced joint batches of current data and memory (half quota each).
pub struct ReplayPlugin {
    buffer: StoragePolicy,
}

impl ReplayPlugin {
    pub fn new(policy: BufferPolicy, mem_size: usize, seed: u64) -> Result<Self> {
        if mem_size == 0 {
            return Err(Error::InvalidArgument(
                "replay memory size must be >= 1".into(),
            ));
        }
        Ok(ReplayPlugin {
            buffer: StoragePolicy::new(policy, mem_size, seed),
        })
    }

    pub fn buffer(&self) -> &StoragePolicy {
        &self.buffer
    }
}

impl Plugin for ReplayPlugin {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn dataset_adaptation(&mut self, state: &mut StrategyState) -> Result<()> {
        if let Some(memory) = self.buffer.contents() {
            let current = state
                .adapted_dataset
                .clone()
                .ok_or_else(|| Error::State("no adapted dataset for replay".into()))?;
            state.joint_sources = Some(vec![current, memory]);
        }
        Ok(())
    }

    fn on_event(&mut self, point: CallbackPoint, state: &mut StrategyState) -> Result<()> {
        if point == CallbackPoint::AfterTrainingExp {
            let exp_index = state
                .current_exp_index
                .ok_or_else(|| Error::State("replay update outside an experience".into()))?;
            let data = state
                .current_train_dataset
                .as_ref()
                .ok_or_else(|| Error::State("replay update without training data".into()))?;
            self.buffer.update(data, exp_index)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.buffer)?)
    }

    fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        self.buffer = serde_json::from_value(snapshot.clone())?;
        Ok(())
    }
}

/// Quadratic anchoring: after each experience, freezes the parameters and a
/// Fisher-diagonal importance estimate; before every backward pass, adds
/// `(lambda/2) * sum F (theta - theta*)^2` per stored anchor to the loss
/// and its gradient to the parameters.
pub struct EwcPlugin {
    lambda: f64,
    fisher_batches: usize,
    anchors: Vec<EwcAnchor>,
}

impl EwcPlugin {
    pub fn new(lambda: f64, fisher_batches: usize) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "anchoring strength must be positive, got {lambda}"
            )));
        }
        if fisher_batches == 0 {
            return Err(Error::InvalidArgument(
                "fisher_batches must be >= 1".into(),
            ));
        }
        Ok(EwcPlugin {
            lambda,
            fisher_batches,
            anchors: Vec::new(),
        })
    }

    pub fn anchors(&self) -> &[EwcAnchor] {
        &self.anchors
    }
}

impl Plugin for EwcPlugin {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn on_event(&mut self, point: CallbackPoint, state: &mut StrategyState) -> Result<()> {
        match point {
            CallbackPoint::BeforeBackward => {
                if self.anchors.is_empty() {
                    return Ok(());
                }
                let penalty = ewc_penalty(&state.model, &self.anchors, self.lambda);
                ewc_accumulate_grads(&mut state.model, &self.anchors, self.lambda);
                state.loss += penalty;
                Ok(())
            }
            CallbackPoint::AfterTrainingExp => {
                let data = state
                    .current_train_dataset
                    .as_ref()
                    .ok_or_else(|| Error::State("anchoring outside an experience".into()))?
                    .clone();
                let fisher = estimate_fisher(
                    &mut state.model,
                    &data,
                    state.hyper.batch_size,
                    self.fisher_batches,
                )?;
                self.anchors.push(make_anchor(&state.model, fisher));
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(json!({ "anchors": self.anchors }))
    }

    fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        self.anchors = serde_json::from_value(snapshot["anchors"].clone())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LwfSnapshot {
    old_model: Option<Model>,
}

/// Distillation: after each experience, snapshots the whole model; before
/// every backward pass, pulls the live model's outputs on the old model's
/// classes toward the snapshot's outputs (temperature-softened KL).
pub struct LwfPlugin {
    alpha: f64,
    temperature: f64,
    old_model: Option<Model>,
}

impl LwfPlugin {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "distillation strength must be positive, got {alpha}"
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(LwfPlugin {
            alpha,
            temperature,
            old_model: None,
        })
    }

    /// The class columns the old model has actually learned, and whether it
    /// can score this batch at all. Single heads score everything; a
    /// multi-head snapshot only scores single-task batches of a task it
    /// owns (mixed or unknown tasks are skipped rather than half-scored).
    fn distill_classes(old: &Model, task_labels: &[i64]) -> Option<Vec<usize>> {
        match &old.head {
            Head::Incremental(h) => {
                let classes: Vec<usize> = h.seen_classes().collect();
                if classes.is_empty() {
                    None
                } else {
                    Some(classes)
                }
            }
            Head::MultiHead(mh) => {
                let first = *task_labels.first()?;
                if task_labels.iter().any(|&t| t != first) {
                    return None;
                }
                let head = mh.head(first)?;
                let classes: Vec<usize> = head.seen_classes().collect();
                if classes.is_empty() {
                    None
                } else {
                    Some(classes)
                }
            }
        }
    }
}

impl Plugin for LwfPlugin {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn on_event(&mut self, point: CallbackPoint, state: &mut StrategyState) -> Result<()> {
        match point {
            CallbackPoint::BeforeBackward => {
                let Some(old) = &self.old_model else {
                    return Ok(());
                };
                let batch = state
                    .mbatch
                    .as_ref()
                    .ok_or_else(|| Error::State("distillation without a batch".into()))?;
                let Some(classes) = Self::distill_classes(old, &batch.task_labels) else {
                    return Ok(());
                };
                let new_logits = state
                    .mb_logits
                    .as_ref()
                    .ok_or_else(|| Error::State("distillation without logits".into()))?;
                let (old_logits, _) = old.forward(batch)?;
                let rows: Vec<usize> = (0..batch.len()).collect();
                let (penalty, d) = lwf_distillation(
                    new_logits,
                    &old_logits,
                    &rows,
                    &classes,
                    self.alpha,
                    self.temperature,
                    batch.len(),
                )?;
                state.loss += penalty;
                let dl = state
                    .mb_dlogits
                    .as_mut()
                    .ok_or_else(|| Error::State("distillation without a gradient".into()))?;
                for (a, &b) in dl.data_mut().iter_mut().zip(d.data()) {
                    *a += b;
                }
                Ok(())
            }
            CallbackPoint::AfterTrainingExp => {
                self.old_model = Some(state.model.clone());
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(LwfSnapshot {
            old_model: self.old_model.clone(),
        })?)
    }

    fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        let snap: LwfSnapshot = serde_json::from_value(snapshot.clone())?;
        self.old_model = snap.old_model;
        Ok(())
    }
}
