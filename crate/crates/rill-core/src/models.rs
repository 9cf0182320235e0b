//! Dynamic classifier architectures.
//!
//! Class-incremental training discovers the label space as it goes, so the
//! output layer cannot be fixed up front. [`IncrementalClassifier`] grows its
//! columns as classes appear, leaving existing columns bit-identical;
//! [`MultiHeadClassifier`] keeps one growing head per task label and routes
//! rows by task. [`Model`] bolts either head onto a shared [`Network`] trunk.
//!
//! Growth invariants the rest of the engine leans on:
//! - adapting to already-covered classes/tasks is a no-op (no RNG advance),
//! - unseen-class logits are masked to [`MASK_LOGIT`] so they carry zero
//!   probability and zero gradient,
//! - parameter enumeration order is stable across growth (trunk first, then
//!   heads by task label).

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::Experience;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{xavier, Activation, ForwardCache, Network, Parameter, Parameterized, MASK_LOGIT};
use crate::rng;

/// A linear head whose output width tracks the highest class id seen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IncrementalClassifier {
    weight: Parameter, // feature_dim x width
    bias: Parameter,   // 1 x width
    seen: BTreeSet<usize>,
    masking: bool,
    rng: ChaCha8Rng,
    feature_dim: usize,
    id_prefix: String,
}

impl IncrementalClassifier {
    /// Starts with zero output columns; the first `adapt` sizes it. `rng`
    /// drives growth initialization and nothing else.
    pub fn new(feature_dim: usize, masking: bool, rng: ChaCha8Rng) -> Self {
        Self::with_id_prefix(feature_dim, masking, rng, "head")
    }

    fn with_id_prefix(
        feature_dim: usize,
        masking: bool,
        rng: ChaCha8Rng,
        id_prefix: &str,
    ) -> Self {
        IncrementalClassifier {
            weight: Parameter::new(format!("{id_prefix}/W"), Matrix::zeros(feature_dim, 0)),
            bias: Parameter::new(format!("{id_prefix}/b"), Matrix::zeros(1, 0)),
            seen: BTreeSet::new(),
            masking,
            rng,
            feature_dim,
            id_prefix: id_prefix.to_string(),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seen_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.seen.iter().copied()
    }

    pub fn masking(&self) -> bool {
        self.masking
    }

    /// Grows to cover `classes`. Existing columns are carried over untouched
    /// (bit-identical); new columns are Xavier draws from this head's growth
    /// stream. No growth needed → the stream is not advanced, which is what
    /// makes adaptation idempotent.
    pub fn adapt_classes(&mut self, classes: &[usize]) {
        let target = classes
            .iter()
            .map(|&c| c + 1)
            .max()
            .unwrap_or(0)
            .max(self.width());
        let old = self.width();
        if target > old {
            let bound_src = xavier(&mut self.rng, self.feature_dim, target - old);
            let mut w = Matrix::zeros(self.feature_dim, target);
            for r in 0..self.feature_dim {
                w.row_mut(r)[..old].copy_from_slice(&self.weight.value.row(r)[..old]);
                w.row_mut(r)[old..].copy_from_slice(bound_src.row(r));
            }
            let mut b = Matrix::zeros(1, target);
            b.row_mut(0)[..old].copy_from_slice(self.bias.value.row(0));
            self.weight = Parameter::new(format!("{}/W", self.id_prefix), w);
            self.bias = Parameter::new(format!("{}/b", self.id_prefix), b);
        }
        self.seen.extend(classes.iter().copied());
    }

    /// `features -> logits`, with unseen classes masked when enabled.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.feature_dim,
                features.cols()
            )));
        }
        let mut logits = features.matmul(&self.weight.value)?;
        logits.add_row(&self.bias.value)?;
        if self.masking {
            for c in 0..self.width() {
                if !self.seen.contains(&c) {
                    for r in 0..logits.rows() {
                        logits.set(r, c, MASK_LOGIT);
                    }
                }
            }
        }
        Ok(logits)
    }

    /// Accumulates parameter grads and returns `d_features`. Masked columns
    /// emit a constant, so their gradient contribution is dropped regardless
    /// of what `d_logits` carries there.
    pub fn backward(&mut self, features: &Matrix, d_logits: &Matrix) -> Result<Matrix> {
        let mut d = d_logits.clone();
        if self.masking {
            for c in 0..self.width() {
                if !self.seen.contains(&c) {
                    for r in 0..d.rows() {
                        d.set(r, c, 0.0);
                    }
                }
            }
        }
        let dw = features.matmul_tn(&d)?;
        crate::nn::accumulate(&mut self.weight.grad, &dw);
        let db = d.col_sums();
        crate::nn::accumulate(&mut self.bias.grad, &db);
        d.matmul_nt(&self.weight.value)
    }
}

impl Parameterized for IncrementalClassifier {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One growing head per task label; rows route by task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadClassifier {
    heads: BTreeMap<i64, IncrementalClassifier>,
    feature_dim: usize,
    masking: bool,
    master_seed: u64,
}

impl MultiHeadClassifier {
    pub fn new(feature_dim: usize, masking: bool, master_seed: u64) -> Self {
        MultiHeadClassifier { heads: BTreeMap::new(), feature_dim, masking, master_seed }
    }

    pub fn tasks(&self) -> impl Iterator<Item = i64> + '_ {
        self.heads.keys().copied()
    }

    pub fn head(&self, task: i64) -> Option<&IncrementalClassifier> {
        self.heads.get(&task)
    }

    pub fn has_task(&self, task: i64) -> bool {
        self.heads.contains_key(&task)
    }

    /// Creates the task's head on first sight, then grows it over `classes`.
    pub fn adapt_task(&mut self, task: i64, classes: &[usize]) {
        let head = self.heads.entry(task).or_insert_with(|| {
            IncrementalClassifier::with_id_prefix(
                self.feature_dim,
                self.masking,
                rng::named_stream(self.master_seed, &format!("head-growth/t{task:03}")),
                &format!("head/t{task:03}"),
            )
        });
        head.adapt_classes(classes);
    }

    /// Routes each row through its task's head. Logits are padded to the
    /// widest head present in the batch; pad columns read [`MASK_LOGIT`].
    pub fn forward(&self, features: &Matrix, task_labels: &[i64]) -> Result<Matrix> {
        let groups = self.group_rows(task_labels)?;
        let width = groups
            .iter()
            .map(|(t, _)| self.heads[t].width())
            .max()
            .unwrap_or(0);
        let mut out = Matrix::filled(features.rows(), width, MASK_LOGIT);
        for (task, rows) in &groups {
            let sub = gather_rows(features, rows);
            let logits = self.heads[task].forward(&sub)?;
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r)[..logits.cols()].copy_from_slice(logits.row(k));
            }
        }
        Ok(out)
    }

    /// Accumulates per-head grads and returns `d_features`. Pad columns are
    /// constants, so only each head's own column range flows back.
    pub fn backward(
        &mut self,
        features: &Matrix,
        task_labels: &[i64],
        d_logits: &Matrix,
    ) -> Result<Matrix> {
        let groups = self.group_rows(task_labels)?;
        let mut d_features = Matrix::zeros(features.rows(), features.cols());
        for (task, rows) in &groups {
            let width = self.heads[task].width();
            let sub_features = gather_rows(features, rows);
            let mut sub_d = Matrix::zeros(rows.len(), width);
            for (k, &r) in rows.iter().enumerate() {
                sub_d.row_mut(k).copy_from_slice(&d_logits.row(r)[..width]);
            }
            let head = self.heads.get_mut(task).expect("grouped over existing heads");
            let sub_df = head.backward(&sub_features, &sub_d)?;
            for (k, &r) in rows.iter().enumerate() {
                d_features.row_mut(r).copy_from_slice(sub_df.row(k));
            }
        }
        Ok(d_features)
    }

    fn group_rows(&self, task_labels: &[i64]) -> Result<Vec<(i64, Vec<usize>)>> {
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (r, &t) in task_labels.iter().enumerate() {
            if !self.heads.contains_key(&t) {
                return Err(Error::NotFound(format!("no head for task {t}")));
            }
            groups.entry(t).or_default().push(r);
        }
        Ok(groups.into_iter().collect())
    }
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

impl Parameterized for MultiHeadClassifier {
    fn params(&self) -> Vec<&Parameter> {
        self.heads.values().flat_map(|h| h.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.heads.values_mut().flat_map(|h| h.params_mut()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Head {
    Incremental(IncrementalClassifier),
    MultiHead(MultiHeadClassifier),
}

impl Head {
    /// Whether rows with this task label can be routed right now.
    pub fn covers_task(&self, task: i64) -> bool {
        match self {
            Head::Incremental(_) => true,
            Head::MultiHead(mh) => mh.has_task(task),
        }
    }
}

/// Trunk network plus a dynamic head: the unit the training engine drives.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub trunk: Network,
    pub head: Head,
}

/// Activations saved by [`Model::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    trunk_cache: ForwardCache,
    features: Matrix,
    task_labels: Vec<i64>,
}

impl Model {
    /// Trunk `[input, hidden..] -> ReLU features`, topped by a growing
    /// single head. All layers ReLU so the head sees nonlinear features.
    pub fn incremental(layout: &[usize], masking: bool, seed: u64) -> Result<Model> {
        let trunk = Network::init_with_final(layout, Activation::Relu, seed)?;
        let head = IncrementalClassifier::new(
            trunk.output_dim(),
            masking,
            rng::named_stream(seed, "head-growth"),
        );
        Ok(Model { trunk, head: Head::Incremental(head) })
    }

    /// As [`Model::incremental`] with a per-task multi-head top.
    pub fn multihead(layout: &[usize], masking: bool, seed: u64) -> Result<Model> {
        let trunk = Network::init_with_final(layout, Activation::Relu, seed)?;
        let head = MultiHeadClassifier::new(trunk.output_dim(), masking, seed);
        Ok(Model { trunk, head: Head::MultiHead(head) })
    }

    /// Grows the head to cover the experience's classes (and task, for
    /// multi-head). Must run before training on the experience; the engine
    /// guarantees that ordering.
    pub fn adapt(&mut self, exp: &Experience) {
        match &mut self.head {
            Head::Incremental(h) => h.adapt_classes(&exp.classes_in_this_experience),
            Head::MultiHead(mh) => {
                mh.adapt_task(exp.task_label, &exp.classes_in_this_experience)
            }
        }
    }

    pub fn forward(&self, batch: &Batch) -> Result<(Matrix, ModelCache)> {
        let (features, trunk_cache) = self.trunk.forward(&batch.x)?;
        let logits = match &self.head {
            Head::Incremental(h) => h.forward(&features)?,
            Head::MultiHead(mh) => mh.forward(&features, &batch.task_labels)?,
        };
        Ok((
            logits,
            ModelCache { trunk_cache, features, task_labels: batch.task_labels.clone() },
        ))
    }

    pub fn backward(&mut self, cache: &ModelCache, d_logits: &Matrix) -> Result<()> {
        let d_features = match &mut self.head {
            Head::Incremental(h) => h.backward(&cache.features, d_logits)?,
            Head::MultiHead(mh) => {
                mh.backward(&cache.features, &cache.task_labels, d_logits)?
            }
        };
        self.trunk.backward(&cache.trunk_cache, &d_features)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One SGD step over trunk and head: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(crate::error::Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for p in self.params_mut() {
            crate::nn::sgd_update(p, lr);
        }
        Ok(())
    }
}

impl Parameterized for Model {
    /// Trunk layers in order, then head parameters by (task, id); growth
    /// appends, never reorders the existing prefix.
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.trunk.params();
        match &self.head {
            Head::Incremental(h) => out.extend(h.params()),
            Head::MultiHead(mh) => out.extend(mh.params()),
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.trunk.params_mut();
        match &mut self.head {
            Head::Incremental(h) => out.extend(h.params_mut()),
            Head::MultiHead(mh) => out.extend(mh.params_mut()),
        }
        out
    }
}
