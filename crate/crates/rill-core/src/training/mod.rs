//! The training engine: one template loop with a fixed callback schedule,
//! specialized into strategies by plugins.
//!
//! Every strategy runs the identical loop; behavioral differences live
//! entirely in plugins, which observe callback points and may rewrite the
//! training dataset, add penalty terms to the loss, or maintain rehearsal
//! memory. The evaluator is always notified after all plugins at a given
//! point, so it measures the state plugins produced, never the state they
//! were about to change.

pub mod plugins;
pub mod regularizers;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::benchmarks::{Experience, Stream};
use crate::buffers::BufferPolicy;
use crate::data::{Batch, DataLoader, Dataset};
use crate::error::{Error, Result};
use crate::logging::{EmitCtx, EvaluationPlugin};
use crate::matrix::Matrix;
use crate::metrics::MetricValue;
use crate::models::Model;
use crate::nn::{softmax_cross_entropy, MASK_LOGIT};
use crate::rng;

use plugins::{CumulativePlugin, EwcPlugin, LwfPlugin, ReplayPlugin};

/// Points in the template loop where plugins run, in schedule order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallbackPoint {
    BeforeTraining,
    BeforeTrainingExp,
    AfterDatasetAdaptation,
    BeforeTrainingEpoch,
    BeforeTrainingIteration,
    BeforeForward,
    AfterForward,
    BeforeBackward,
    AfterBackward,
    AfterTrainingIteration,
    AfterUpdate,
    AfterTrainingEpoch,
    AfterTrainingExp,
    AfterTraining,
    BeforeEval,
    BeforeEvalExp,
    BeforeEvalIteration,
    AfterEvalIteration,
    AfterEvalExp,
    AfterEval,
}

/// A strategy behavior. `dataset_adaptation` runs once per experience
/// between model adaptation and loader construction — the single place
/// where the training data or its loading scheme may be replaced.
/// `snapshot`/`restore` round-trip plugin state through checkpoints.
pub trait Plugin {
    fn name(&self) -> &'static str;

    fn on_event(&mut self, _point: CallbackPoint, _state: &mut StrategyState) -> Result<()> {
        Ok(())
    }

    fn dataset_adaptation(&mut self, _state: &mut StrategyState) -> Result<()> {
        Ok(())
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::Value::Null)
    }

    fn restore(&mut self, _snapshot: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize,
)]
pub struct Clock {
    /// Training iterations completed across the whole run; the metric x-axis.
    pub total_iterations: u64,
    pub epochs_in_current_exp: usize,
    pub experiences_seen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Everything plugins can see and mutate. The `mbatch`/`mb_logits`/
/// `mb_dlogits`/`loss` fields are per-iteration scratch, populated between
/// the matching callback points and cleared after; `history` holds every
/// training dataset seen so far (rebuilt from the benchmark on resume, never
/// serialized).
pub struct StrategyState {
    pub model: Model,
    pub hyper: Hyperparams,
    pub clock: Clock,
    pub master_seed: u64,
    /// Drawn from once per training epoch for loader shuffling/resampling.
    pub shuffle_rng: ChaCha8Rng,
    pub is_training: bool,
    pub current_exp_index: Option<usize>,
    pub current_task: i64,
    /// The experience's own dataset, untouched by adaptation.
    pub current_train_dataset: Option<Dataset>,
    /// What the loader draws from; plugins may replace it.
    pub adapted_dataset: Option<Dataset>,
    /// When set, training uses a balanced joint loader over these sources
    /// instead of a plain shuffled loader over `adapted_dataset`.
    pub joint_sources: Option<Vec<Dataset>>,
    pub mbatch: Option<Batch>,
    pub mb_logits: Option<Matrix>,
    pub mb_dlogits: Option<Matrix>,
    pub loss: f64,
    pub history: Vec<Dataset>,
}

pub struct Strategy {
    pub state: StrategyState,
    plugins: Vec<Box<dyn Plugin>>,
    pub evaluator: EvaluationPlugin,
}

fn validate_hyper(h: &Hyperparams) -> Result<()> {
    if !(h.lr > 0.0) || !h.lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            h.lr
        )));
    }
    if h.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if h.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    Ok(())
}

impl Strategy {
    pub fn new(
        model: Model,
        hyper: Hyperparams,
        master_seed: u64,
        evaluator: EvaluationPlugin,
        plugins: Vec<Box<dyn Plugin>>,
    ) -> Result<Strategy> {
        validate_hyper(&hyper)?;
        Ok(Strategy {
            state: StrategyState {
                model,
                hyper,
                clock: Clock::default(),
                master_seed,
                shuffle_rng: rng::named_stream(master_seed, "shuffle"),
                is_training: false,
                current_exp_index: None,
                current_task: 0,
                current_train_dataset: None,
                adapted_dataset: None,
                joint_sources: None,
                mbatch: None,
                mb_logits: None,
                mb_dlogits: None,
                loss: 0.0,
                history: Vec::new(),
            },
            plugins,
            evaluator,
        })
    }

    fn dispatch(&mut self, point: CallbackPoint) -> Result<()> {
        for p in &mut self.plugins {
            p.on_event(point, &mut self.state)?;
        }
        Ok(())
    }

    /// Trains on each experience in order. One call wraps the whole slice
    /// in the outer training callbacks, so per-experience driving (the
    /// usual pattern) passes a one-element slice.
    pub fn train(&mut self, experiences: &[Experience]) -> Result<()> {
        self.dispatch(CallbackPoint::BeforeTraining)?;
        for exp in experiences {
            self.train_experience(exp)?;
        }
        self.dispatch(CallbackPoint::AfterTraining)?;
        Ok(())
    }

    fn train_experience(&mut self, exp: &Experience) -> Result<()> {
        self.state.is_training = true;
        self.dispatch(CallbackPoint::BeforeTrainingExp)?;
        self.evaluator.before_training_exp(exp.index)?;

        self.state.current_exp_index = Some(exp.index);
        self.state.current_task = exp.task_label;
        self.state.history.push(exp.dataset.clone());
        self.state.current_train_dataset = Some(exp.dataset.clone());
        self.state.model.adapt(exp);
        self.state.adapted_dataset = Some(exp.dataset.clone());
        self.state.joint_sources = None;
        for p in &mut self.plugins {
            p.dataset_adaptation(&mut self.state)?;
        }
        self.dispatch(CallbackPoint::AfterDatasetAdaptation)?;

        let loader = if let Some(sources) = &self.state.joint_sources {
            DataLoader::BalancedJoint {
                sources: sources.clone(),
                batch_size: self.state.hyper.batch_size,
            }
        } else {
            DataLoader::Plain {
                dataset: self
                    .state
                    .adapted_dataset
                    .clone()
                    .expect("adapted dataset set above"),
                batch_size: self.state.hyper.batch_size,
                shuffle: true,
            }
        };

        for epoch in 0..self.state.hyper.epochs {
            self.state.clock.epochs_in_current_exp = epoch;
            self.dispatch(CallbackPoint::BeforeTrainingEpoch)?;
            let seed = self.state.shuffle_rng.gen::<u64>();
            for plan in loader.plan_epoch(seed)? {
                self.dispatch(CallbackPoint::BeforeTrainingIteration)?;
                self.state.model.zero_grads();
                self.state.mbatch = Some(loader.materialize(&plan));

                self.dispatch(CallbackPoint::BeforeForward)?;
                let (logits, cache) = {
                    let b = self.state.mbatch.as_ref().expect("batch set above");
                    self.state.model.forward(b)?
                };
                self.state.mb_logits = Some(logits);
                self.dispatch(CallbackPoint::AfterForward)?;

                let (loss, d_logits) = {
                    let b = self.state.mbatch.as_ref().expect("batch set above");
                    let l = self.state.mb_logits.as_ref().expect("logits set above");
                    softmax_cross_entropy(l, &b.y, None)?
                };
                if !loss.is_finite() {
                    return Err(Error::Runtime(format!(
                        "non-finite loss at iteration {}",
                        self.state.clock.total_iterations
                    )));
                }
                self.state.loss = loss;
                self.state.mb_dlogits = Some(d_logits);
                self.dispatch(CallbackPoint::BeforeBackward)?;

                let d = self
                    .state
                    .mb_dlogits
                    .take()
                    .expect("gradient set before backward");
                self.state.model.backward(&cache, &d)?;
                self.dispatch(CallbackPoint::AfterBackward)?;
                self.dispatch(CallbackPoint::AfterTrainingIteration)?;
                {
                    let ctx = EmitCtx {
                        x_axis: self.state.clock.total_iterations,
                        stream: &exp.stream_name,
                        task: exp.task_label,
                        exp_index: exp.index,
                        trained_experiences: self.state.clock.experiences_seen,
                    };
                    let b = self.state.mbatch.as_ref().expect("batch set above");
                    let l = self.state.mb_logits.as_ref().expect("logits set above");
                    self.evaluator
                        .after_training_iteration(&ctx, l, &b.y, self.state.loss)?;
                }

                self.state.model.sgd_step(self.state.hyper.lr)?;
                self.dispatch(CallbackPoint::AfterUpdate)?;
                self.state.clock.total_iterations += 1;
                self.state.mbatch = None;
                self.state.mb_logits = None;
            }
            self.dispatch(CallbackPoint::AfterTrainingEpoch)?;
            let ctx = EmitCtx {
                x_axis: self.state.clock.total_iterations,
                stream: &exp.stream_name,
                task: exp.task_label,
                exp_index: exp.index,
                trained_experiences: self.state.clock.experiences_seen,
            };
            self.evaluator.after_training_epoch(&ctx)?;
        }

        self.dispatch(CallbackPoint::AfterTrainingExp)?;
        let ctx = EmitCtx {
            x_axis: self.state.clock.total_iterations,
            stream: &exp.stream_name,
            task: exp.task_label,
            exp_index: exp.index,
            trained_experiences: self.state.clock.experiences_seen,
        };
        self.evaluator.after_training_exp(&ctx)?;

        self.state.clock.experiences_seen += 1;
        self.state.clock.epochs_in_current_exp = 0;
        self.state.current_exp_index = None;
        self.state.current_task = 0;
        self.state.current_train_dataset = None;
        self.state.adapted_dataset = None;
        self.state.joint_sources = None;
        self.state.is_training = false;
        Ok(())
    }

    /// Evaluates every experience in the stream, in order, without mutating
    /// the model, advancing any RNG, or moving the clock. Returns the
    /// metric values emitted during this pass.
    ///
    /// Evaluating an experience whose task the model has never adapted to
    /// is an error (the forward pass has no head for it); callers that want
    /// partial coverage should filter with [`Strategy::covered_subset`].
    pub fn eval(&mut self, stream: &Stream) -> Result<Vec<MetricValue>> {
        self.state.is_training = false;
        self.dispatch(CallbackPoint::BeforeEval)?;
        self.evaluator.before_eval();

        for exp in &stream.experiences {
            self.dispatch(CallbackPoint::BeforeEvalExp)?;
            self.evaluator.before_eval_exp();
            let loader = DataLoader::Plain {
                dataset: exp.dataset.clone(),
                batch_size: self.state.hyper.batch_size,
                shuffle: false,
            };
            for plan in loader.plan_epoch(0)? {
                self.dispatch(CallbackPoint::BeforeEvalIteration)?;
                let batch = loader.materialize(&plan);
                let (logits, _) = self.state.model.forward(&batch)?;
                let loss = eval_loss(&logits, &batch.y)?;
                self.state.mbatch = Some(batch);
                self.state.mb_logits = Some(logits);
                self.state.loss = loss;
                self.dispatch(CallbackPoint::AfterEvalIteration)?;
                {
                    let b = self.state.mbatch.as_ref().expect("batch set above");
                    let l = self.state.mb_logits.as_ref().expect("logits set above");
                    self.evaluator.after_eval_iteration(l, &b.y, loss)?;
                }
                self.state.mbatch = None;
                self.state.mb_logits = None;
            }
            self.dispatch(CallbackPoint::AfterEvalExp)?;
            let ctx = EmitCtx {
                x_axis: self.state.clock.total_iterations,
                stream: &stream.name,
                task: exp.task_label,
                exp_index: exp.index,
                trained_experiences: self.state.clock.experiences_seen,
            };
            self.evaluator.after_eval_exp(&ctx)?;
        }

        self.dispatch(CallbackPoint::AfterEval)?;
        let ctx = EmitCtx {
            x_axis: self.state.clock.total_iterations,
            stream: &stream.name,
            task: 0,
            exp_index: 0,
            trained_experiences: self.state.clock.experiences_seen,
        };
        self.evaluator.after_eval(&ctx)?;
        Ok(self.evaluator.take_captured())
    }

    /// The sub-stream of experiences the model can currently score: all of
    /// them for single-head models, only adapted tasks for multi-head.
    pub fn covered_subset(&self, stream: &Stream) -> Stream {
        Stream {
            name: stream.name.clone(),
            experiences: stream
                .experiences
                .iter()
                .filter(|e| self.state.model.head.covers_task(e.task_label))
                .cloned()
                .collect(),
        }
    }

    /// Per-plugin checkpoint payloads, keyed by plugin name.
    pub fn plugins_snapshot(&self) -> Result<BTreeMap<String, serde_json::Value>> {
        let mut out = BTreeMap::new();
        for p in &self.plugins {
            if out.insert(p.name().to_string(), p.snapshot()?).is_some() {
                return Err(Error::State(format!(
                    "duplicate plugin name {:?}",
                    p.name()
                )));
            }
        }
        Ok(out)
    }

    /// Restores each plugin from its named payload. Every plugin must have
    /// an entry: a missing one means the checkpoint came from a different
    /// strategy configuration.
    pub fn plugins_restore(
        &mut self,
        snapshots: &BTreeMap<String, serde_json::Value>,
    ) -> Result<()> {
        for p in &mut self.plugins {
            let snap = snapshots.get(p.name()).ok_or_else(|| {
                Error::CheckpointMismatch(format!(
                    "checkpoint has no state for plugin {:?}",
                    p.name()
                ))
            })?;
            p.restore(snap)?;
        }
        Ok(())
    }
}

/// Eval-time loss that tolerates targets beyond the current logit width:
/// the logits are padded with [`MASK_LOGIT`] columns, so an unknown class
/// behaves exactly like a masked one (zero probability) instead of being
/// a shape error. Training never needs this — adaptation guarantees the
/// head covers its targets.
fn eval_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    let width = logits.cols();
    let max_target = targets.iter().copied().max().unwrap_or(0);
    if max_target < width {
        return Ok(softmax_cross_entropy(logits, targets, None)?.0);
    }
    let mut padded = Matrix::filled(logits.rows(), max_target + 1, MASK_LOGIT);
    for r in 0..logits.rows() {
        padded.row_mut(r)[..width].copy_from_slice(logits.row(r));
    }
    Ok(softmax_cross_entropy(&padded, targets, None)?.0)
}

pub fn make_naive(
    model: Model,
    hyper: Hyperparams,
    master_seed: u64,
    evaluator: EvaluationPlugin,
) -> Result<Strategy> {
    Strategy::new(model, hyper, master_seed, evaluator, Vec::new())
}

pub fn make_cumulative(
    model: Model,
    hyper: Hyperparams,
    master_seed: u64,
    evaluator: EvaluationPlugin,
) -> Result<Strategy> {
    Strategy::new(
        model,
        hyper,
        master_seed,
        evaluator,
        vec![Box::new(CumulativePlugin)],
    )
}

pub fn make_replay(
    model: Model,
    hyper: Hyperparams,
    master_seed: u64,
    evaluator: EvaluationPlugin,
    policy: BufferPolicy,
    mem_size: usize,
) -> Result<Strategy> {
    let buffer_seed = rng::named_stream(master_seed, "replay-buffer").gen::<u64>();
    let plugin = ReplayPlugin::new(policy, mem_size, buffer_seed)?;
    Strategy::new(model, hyper, master_seed, evaluator, vec![Box::new(plugin)])
}

pub fn make_ewc(
    model: Model,
    hyper: Hyperparams,
    master_seed: u64,
    evaluator: EvaluationPlugin,
    lambda: f64,
    fisher_batches: usize,
) -> Result<Strategy> {
    let plugin = EwcPlugin::new(lambda, fisher_batches)?;
    Strategy::new(model, hyper, master_seed, evaluator, vec![Box::new(plugin)])
}

pub fn make_lwf(
    model: Model,
    hyper: Hyperparams,
    master_seed: u64,
    evaluator: EvaluationPlugin,
    alpha: f64,
    temperature: f64,
) -> Result<Strategy> {
    let plugin = LwfPlugin::new(alpha, temperature)?;
    Strategy::new(model, hyper, master_seed, evaluator, vec![Box::new(plugin)])
}
