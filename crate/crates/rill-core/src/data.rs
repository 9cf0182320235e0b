//! Datasets as cheap views over shared feature storage.
//!
//! `subsample`, `concat`, `with_attribute`, and transform-group switches all
//! produce new [`Dataset`] values without copying feature rows: each view
//! holds `Arc`s to its source matrices plus a per-example `(source, row)`
//! map. Targets and integer attributes are small per-view vectors. Serialization
//! materializes the view, so a round-trip is self-contained but behaviorally
//! identical.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Name of the per-example attribute carrying task identity. Every dataset
/// has it; constructors attach zeros when absent.
pub const TASK_LABEL_ATTR: &str = "task_label";

/// Default (identity) transform group, active on fresh datasets.
pub const DEFAULT_GROUP: &str = "default";

/// Elementwise affine feature transform: `x * scale + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub scale: f64,
    pub shift: f64,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec { scale: 1.0, shift: 0.0 };

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        x * self.scale + self.shift
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "DatasetSnapshot", into = "DatasetSnapshot")]
pub struct Dataset {
    sources: Vec<Arc<Matrix>>,
    /// Per-example (source index, row within source).
    rows: Vec<(u32, u32)>,
    targets: Vec<usize>,
    attrs: BTreeMap<String, Vec<i64>>,
    transform_groups: BTreeMap<String, TransformSpec>,
    active_group: String,
}

impl Dataset {
    /// A dataset owning one feature matrix. Targets are class indices, one
    /// per row. The `task_label` attribute is attached as all-zeros.
    pub fn new(features: Matrix, targets: Vec<usize>) -> Result<Dataset> {
        if targets.len() != features.rows() {
            return Err(Error::Shape(format!(
                "dataset: {} targets for {} feature rows",
                targets.len(),
                features.rows()
            )));
        }
        let n = features.rows();
        let rows = (0..n as u32).map(|r| (0u32, r)).collect();
        let mut attrs = BTreeMap::new();
        attrs.insert(TASK_LABEL_ATTR.to_string(), vec![0i64; n]);
        let mut transform_groups = BTreeMap::new();
        transform_groups.insert(DEFAULT_GROUP.to_string(), TransformSpec::IDENTITY);
        Ok(Dataset {
            sources: vec![Arc::new(features)],
            rows,
            targets,
            attrs,
            transform_groups,
            active_group: DEFAULT_GROUP.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.sources.first().map_or(0, |s| s.cols())
    }

    pub fn target(&self, i: usize) -> usize {
        self.targets[i]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Feature row `i` with the active transform group applied.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        let spec = self.transform_groups[&self.active_group];
        let (s, r) = self.rows[i];
        let raw = self.sources[s as usize].row(r as usize);
        raw.iter().map(|&x| spec.apply(x)).collect()
    }

    /// Feature row `i` without any transform.
    pub fn raw_feature_row(&self, i: usize) -> &[f64] {
        let (s, r) = self.rows[i];
        self.sources[s as usize].row(r as usize)
    }

    pub fn attr(&self, name: &str) -> Option<&[i64]> {
        self.attrs.get(name).map(|v| v.as_slice())
    }

    pub fn attr_names(&self) -> impl Iterator<Item = &str> {
        self.attrs.keys().map(|s| s.as_str())
    }

    pub fn task_label_of(&self, i: usize) -> i64 {
        self.attrs[TASK_LABEL_ATTR][i]
    }

    /// Distinct target classes, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.targets.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn transform_groups(&self) -> &BTreeMap<String, TransformSpec> {
        &self.transform_groups
    }

    pub fn active_group(&self) -> &str {
        &self.active_group
    }

    /// View containing `indices` in order (duplicates allowed). Shares
    /// feature storage with `self`.
    pub fn subsample(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::OutOfRange(format!(
                "subsample index {bad} in dataset of {}",
                self.len()
            )));
        }
        let rows = indices.iter().map(|&i| self.rows[i]).collect();
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        let attrs = self
            .attrs
            .iter()
            .map(|(k, col)| (k.clone(), indices.iter().map(|&i| col[i]).collect()))
            .collect();
        Ok(Dataset {
            sources: self.sources.clone(),
            rows,
            targets,
            attrs,
            transform_groups: self.transform_groups.clone(),
            active_group: self.active_group.clone(),
        })
    }

    /// Row-wise concatenation, first part's examples first. Parts must agree
    /// on feature width, attribute schema, transform groups, and active
    /// group; feature storage is shared, not copied.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero datasets".into()))?;
        check_compatible(parts)?;

        let mut out = Dataset {
            sources: Vec::new(),
            rows: Vec::new(),
            targets: Vec::new(),
            attrs: first.attrs.keys().map(|k| (k.clone(), Vec::new())).collect(),
            transform_groups: first.transform_groups.clone(),
            active_group: first.active_group.clone(),
        };
        for part in parts {
            // Re-index this part's sources into the merged list, reusing
            // entries that point at the same storage.
            let remap: Vec<u32> = part
                .sources
                .iter()
                .map(|src| {
                    if let Some(at) =
                        out.sources.iter().position(|have| Arc::ptr_eq(have, src))
                    {
                        at as u32
                    } else {
                        out.sources.push(src.clone());
                        (out.sources.len() - 1) as u32
                    }
                })
                .collect();
            out.rows.extend(part.rows.iter().map(|&(s, r)| (remap[s as usize], r)));
            out.targets.extend_from_slice(&part.targets);
            for (k, col) in &part.attrs {
                out.attrs.get_mut(k).expect("schema checked").extend_from_slice(col);
            }
        }
        Ok(out)
    }

    /// Copy of this view with attribute `name` set to `values` (added or
    /// replaced).
    pub fn with_attribute(&self, name: &str, values: Vec<i64>) -> Result<Dataset> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "attribute `{name}`: {} values for {} examples",
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        out.attrs.insert(name.to_string(), values);
        Ok(out)
    }

    /// Copy with transform group `name` registered (added or replaced).
    pub fn with_transform_group_def(&self, name: &str, spec: TransformSpec) -> Dataset {
        let mut out = self.clone();
        out.transform_groups.insert(name.to_string(), spec);
        out
    }

    /// Copy with `name` as the active transform group.
    pub fn with_transform_group(&self, name: &str) -> Result<Dataset> {
        if !self.transform_groups.contains_key(name) {
            return Err(Error::NotFound(format!("transform group `{name}`")));
        }
        let mut out = self.clone();
        out.active_group = name.to_string();
        Ok(out)
    }

    /// Batches of `batch_size` (final one may be short). With `shuffle`, the
    /// visit order is a seed-determined permutation; otherwise index order.
    pub fn batches(&self, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
        let loader = if shuffle {
            LoaderKind::Shuffled { seed }
        } else {
            LoaderKind::Sequential
        };
        let plans = plan_plain(self.len(), batch_size, loader)?;
        Ok(Batches { dataset: self, plans: plans.into_iter() })
    }

    pub(crate) fn fill_batch(&self, rows: &[usize]) -> Batch {
        let spec = self.transform_groups[&self.active_group];
        let d = self.feature_dim();
        let mut x = Matrix::zeros(rows.len(), d);
        let mut y = Vec::with_capacity(rows.len());
        let mut task_labels = Vec::with_capacity(rows.len());
        for (out_i, &i) in rows.iter().enumerate() {
            let raw = self.raw_feature_row(i);
            let dst = x.row_mut(out_i);
            for (o, &v) in dst.iter_mut().zip(raw) {
                *o = spec.apply(v);
            }
            y.push(self.targets[i]);
            task_labels.push(self.task_label_of(i));
        }
        Batch { x, y, task_labels }
    }

    /// True when the same storage backs both views (no rows were copied).
    pub fn shares_storage_with(&self, other: &Dataset) -> bool {
        self.sources
            .iter()
            .any(|a| other.sources.iter().any(|b| Arc::ptr_eq(a, b)))
    }
}

/// Schema agreement required for concatenation (and for mixing buffer rows):
/// same feature width, attribute keys, transform groups, and active group.
pub(crate) fn schema_matches(a: &Dataset, b: &Dataset) -> Result<()> {
    check_pair(a, b, 1)
}

fn check_compatible(parts: &[Dataset]) -> Result<()> {
    let first = &parts[0];
    for (i, p) in parts.iter().enumerate().skip(1) {
        check_pair(first, p, i)?;
    }
    Ok(())
}

fn check_pair(first: &Dataset, p: &Dataset, i: usize) -> Result<()> {
    if p.feature_dim() != first.feature_dim() {
        return Err(Error::Shape(format!(
            "concat: part {i} has width {}, part 0 has {}",
            p.feature_dim(),
            first.feature_dim()
        )));
    }
    if p.attrs.len() != first.attrs.len()
        || p.attrs.keys().zip(first.attrs.keys()).any(|(a, b)| a != b)
    {
        return Err(Error::InvalidArgument(format!(
            "concat: part {i} has a different attribute schema"
        )));
    }
    if p.transform_groups != first.transform_groups {
        return Err(Error::InvalidArgument(format!(
            "concat: part {i} has different transform groups"
        )));
    }
    if p.active_group != first.active_group {
        return Err(Error::InvalidArgument(format!(
            "concat: part {i} activates `{}`, part 0 `{}`",
            p.active_group, first.active_group
        )));
    }
    Ok(())
}

/// One training batch: features with the active transform applied, targets,
/// and per-example task labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub task_labels: Vec<i64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Lazy batch iterator over a single dataset.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    plans: std::vec::IntoIter<BatchPlan>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let plan = self.plans.next()?;
        let rows: Vec<usize> = plan.rows.iter().map(|&(_, r)| r).collect();
        Some(self.dataset.fill_batch(&rows))
    }
}

enum LoaderKind {
    Sequential,
    Shuffled { seed: u64 },
}

/// Row assignments for one batch, as (source index, row index) pairs. Plans
/// are pure index bookkeeping: cheap to build for a whole epoch, materialized
/// one batch at a time.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    rows: Vec<(usize, usize)>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }
}

fn plan_plain(n: usize, batch_size: usize, kind: LoaderKind) -> Result<Vec<BatchPlan>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let LoaderKind::Shuffled { seed } = kind {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| BatchPlan { rows: chunk.iter().map(|&r| (0, r)).collect() })
        .collect())
}

/// Epoch loader used by the training engine. `BalancedJoint` is what replay
/// training runs on: every batch mixes a fixed quota from each source.
pub enum DataLoader {
    Plain {
        dataset: Dataset,
        batch_size: usize,
        shuffle: bool,
    },
    BalancedJoint {
        sources: Vec<Dataset>,
        batch_size: usize,
    },
}

impl DataLoader {
    /// Index plans for one epoch. `seed` fixes shuffling and any resampling.
    pub fn plan_epoch(&self, seed: u64) -> Result<Vec<BatchPlan>> {
        match self {
            DataLoader::Plain { dataset, batch_size, shuffle } => {
                let kind = if *shuffle {
                    LoaderKind::Shuffled { seed }
                } else {
                    LoaderKind::Sequential
                };
                plan_plain(dataset.len(), *batch_size, kind)
            }
            DataLoader::BalancedJoint { sources, batch_size } => {
                plan_balanced(sources, *batch_size, seed)
            }
        }
    }

    pub fn materialize(&self, plan: &BatchPlan) -> Batch {
        match self {
            DataLoader::Plain { dataset, .. } => {
                let rows: Vec<usize> = plan.rows.iter().map(|&(_, r)| r).collect();
                dataset.fill_batch(&rows)
            }
            DataLoader::BalancedJoint { sources, .. } => {
                // Rows are grouped by source within a plan; materialize each
                // source's run and splice in order.
                let mut parts: Vec<Batch> = Vec::new();
                let mut i = 0;
                while i < plan.rows.len() {
                    let src = plan.rows[i].0;
                    let mut rows = Vec::new();
                    while i < plan.rows.len() && plan.rows[i].0 == src {
                        rows.push(plan.rows[i].1);
                        i += 1;
                    }
                    parts.push(sources[src].fill_batch(&rows));
                }
                splice_batches(parts)
            }
        }
    }

    /// Total examples one epoch yields.
    pub fn epoch_len(&self, seed: u64) -> Result<usize> {
        Ok(self.plan_epoch(seed)?.iter().map(BatchPlan::len).sum())
    }
}

fn splice_batches(parts: Vec<Batch>) -> Batch {
    let total: usize = parts.iter().map(Batch::len).sum();
    let d = parts.first().map_or(0, |b| b.x.cols());
    let mut x = Matrix::zeros(total, d);
    let mut y = Vec::with_capacity(total);
    let mut task_labels = Vec::with_capacity(total);
    let mut at = 0;
    for part in parts {
        for r in 0..part.len() {
            x.row_mut(at).copy_from_slice(part.x.row(r));
            at += 1;
        }
        y.extend(part.y);
        task_labels.extend(part.task_labels);
    }
    Batch { x, y, task_labels }
}

/// Batch plans mixing all sources at fixed per-batch quotas.
///
/// `batch_size` splits as evenly as possible across sources, earlier sources
/// taking the remainder. The first largest source drives the epoch: it is
/// visited exactly once in a seed-determined order (the final batch may run
/// short). Every other source reshuffles and then resamples with replacement
/// once its own permutation is exhausted. Within a batch, rows are grouped by
/// source, in source order.
pub fn balanced_joint_plan(
    sources: &[Dataset],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchPlan>> {
    plan_balanced(sources, batch_size, seed)
}

fn plan_balanced(sources: &[Dataset], batch_size: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    if sources.is_empty() {
        return Err(Error::InvalidArgument("balanced loader needs at least one source".into()));
    }
    if let Some(i) = sources.iter().position(Dataset::is_empty) {
        return Err(Error::InvalidArgument(format!("balanced loader: source {i} is empty")));
    }
    let s = sources.len();
    if batch_size < s {
        return Err(Error::InvalidArgument(format!(
            "balanced loader: batch_size {batch_size} < {s} sources"
        )));
    }
    check_compatible_refs(sources)?;

    let quotas: Vec<usize> =
        (0..s).map(|i| batch_size / s + usize::from(i < batch_size % s)).collect();
    let sizes: Vec<usize> = sources.iter().map(Dataset::len).collect();
    let n_max = *sizes.iter().max().expect("non-empty");
    let driver = sizes.iter().position(|&n| n == n_max).expect("non-empty");
    let n_batches = n_max.div_ceil(quotas[driver]);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut cursors = vec![0usize; s];

    let mut plans = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut rows = Vec::with_capacity(batch_size);
        for src in 0..s {
            for _ in 0..quotas[src] {
                if cursors[src] < sizes[src] {
                    rows.push((src, perms[src][cursors[src]]));
                    cursors[src] += 1;
                } else if src == driver {
                    break; // short final batch; the driver is never resampled
                } else {
                    rows.push((src, rng.gen_range(0..sizes[src])));
                }
            }
        }
        plans.push(BatchPlan { rows });
    }
    Ok(plans)
}

fn check_compatible_refs(parts: &[Dataset]) -> Result<()> {
    check_compatible(parts)
}

/// All batches of a balanced joint epoch, materialized.
pub fn balanced_joint_loader(
    sources: Vec<Dataset>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let loader = DataLoader::BalancedJoint { sources, batch_size };
    let plans = loader.plan_epoch(seed)?;
    Ok(plans.iter().map(|p| loader.materialize(p)).collect())
}

/// Materialized snapshot used for (de)serialization: raw features are copied
/// into one matrix, transform groups and attributes carried verbatim.
#[derive(Serialize, Deserialize)]
struct DatasetSnapshot {
    features: Matrix,
    targets: Vec<usize>,
    attrs: BTreeMap<String, Vec<i64>>,
    transform_groups: BTreeMap<String, TransformSpec>,
    active_group: String,
}

impl From<Dataset> for DatasetSnapshot {
    fn from(ds: Dataset) -> Self {
        let n = ds.len();
        let d = ds.feature_dim();
        let mut features = Matrix::zeros(n, d);
        for i in 0..n {
            features.row_mut(i).copy_from_slice(ds.raw_feature_row(i));
        }
        DatasetSnapshot {
            features,
            targets: ds.targets,
            attrs: ds.attrs,
            transform_groups: ds.transform_groups,
            active_group: ds.active_group,
        }
    }
}

impl From<DatasetSnapshot> for Dataset {
    fn from(s: DatasetSnapshot) -> Self {
        let n = s.features.rows();
        Dataset {
            sources: vec![Arc::new(s.features)],
            rows: (0..n as u32).map(|r| (0, r)).collect(),
            targets: s.targets,
            attrs: s.attrs,
            transform_groups: s.transform_groups,
            active_group: s.active_group,
        }
    }
}
