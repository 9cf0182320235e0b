//! Exemplar buffers: what replay training remembers.
//!
//! Three storage policies over a fixed budget. [`ReservoirBuffer`] keeps a
//! uniform random sample of everything ever offered (Algorithm R: item `t`
//! enters with probability `max_size/t`). The balanced buffers partition the
//! budget into per-group reservoirs — by class or by experience — recomputing
//! quotas as new groups appear so the budget always splits as evenly as the
//! remainder allows (`floor(max/G)`, remainder to the lowest keys).
//!
//! Buffers hold concrete row views (not indices into live datasets), so a
//! serialized buffer is self-contained.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{schema_matches, Dataset};
use crate::error::Result;

/// Common surface of all storage policies. `update` offers every row of
/// `incoming`; `exp_index` tags provenance for experience-keyed policies.
pub trait ExemplarsBuffer {
    fn update(&mut self, incoming: &Dataset, exp_index: usize) -> Result<()>;
    /// Changes capacity; shrinking evicts uniformly at random.
    fn resize(&mut self, new_size: usize);
    /// Stored rows as one dataset, `None` while empty.
    fn contents(&self) -> Option<Dataset>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn max_size(&self) -> usize;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReservoirBuffer {
    max_size: usize,
    /// Lifetime count of offered rows (the `t` of Algorithm R).
    seen: u64,
    rows: Vec<Dataset>,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(max_size: usize, seed: u64) -> Self {
        Self::with_rng(max_size, ChaCha8Rng::seed_from_u64(seed))
    }

    fn with_rng(max_size: usize, rng: ChaCha8Rng) -> Self {
        ReservoirBuffer { max_size, seen: 0, rows: Vec::new(), rng }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    fn offer(&mut self, row: Dataset) -> Result<()> {
        if let Some(first) = self.rows.first() {
            schema_matches(first, &row)?;
        }
        self.seen += 1;
        if self.rows.len() < self.max_size {
            self.rows.push(row);
            return Ok(());
        }
        // Full: item t replaces a uniformly random slot with prob max/t.
        let j = self.rng.gen_range(0..self.seen);
        if (j as usize) < self.max_size {
            self.rows[j as usize] = row;
        }
        Ok(())
    }

    fn evict_to(&mut self, target: usize) {
        while self.rows.len() > target {
            let j = self.rng.gen_range(0..self.rows.len());
            self.rows.remove(j);
        }
    }
}

impl ExemplarsBuffer for ReservoirBuffer {
    fn update(&mut self, incoming: &Dataset, _exp_index: usize) -> Result<()> {
        for i in 0..incoming.len() {
            self.offer(incoming.subsample(&[i])?)?;
        }
        Ok(())
    }

    fn resize(&mut self, new_size: usize) {
        self.max_size = new_size;
        self.evict_to(new_size);
    }

    fn contents(&self) -> Option<Dataset> {
        if self.rows.is_empty() {
            None
        } else {
            Some(Dataset::concat(&self.rows).expect("rows schema-checked on entry"))
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn max_size(&self) -> usize {
        self.max_size
    }
}

/// Budget split across per-group reservoirs keyed by `K` (class id or
/// experience index). Adaptive: new groups trigger quota recomputation and
/// resize of every group before the incoming rows are fed.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct GroupedBuffer<K: Ord> {
    max_size: usize,
    groups: BTreeMap<K, ReservoirBuffer>,
    /// Seeds sub-reservoirs and nothing else, so group creation order (always
    /// ascending) fixes all downstream draws.
    rng: ChaCha8Rng,
}

impl<K: Ord + Copy + std::fmt::Debug> GroupedBuffer<K> {
    fn new(max_size: usize, seed: u64) -> Self {
        GroupedBuffer {
            max_size,
            groups: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Quota rule: `floor(max/G)` each, remainder to the lowest keys.
    fn admit_groups_and_requota(&mut self, new_keys: &BTreeSet<K>) {
        for &k in new_keys {
            if !self.groups.contains_key(&k) {
                let seed = self.rng.gen::<u64>();
                self.groups.insert(k, ReservoirBuffer::new(0, seed));
            }
        }
        let n = self.groups.len();
        for (rank, buf) in self.groups.values_mut().enumerate() {
            let quota = self.max_size / n + usize::from(rank < self.max_size % n);
            buf.resize(quota);
        }
    }

    fn update_with<F>(&mut self, incoming: &Dataset, key_of: F) -> Result<()>
    where
        F: Fn(&Dataset, usize) -> K,
    {
        if incoming.is_empty() {
            return Ok(());
        }
        let new_keys: BTreeSet<K> = (0..incoming.len()).map(|i| key_of(incoming, i)).collect();
        self.admit_groups_and_requota(&new_keys);
        for i in 0..incoming.len() {
            let k = key_of(incoming, i);
            let row = incoming.subsample(&[i])?;
            self.groups.get_mut(&k).expect("admitted above").offer(row)?;
        }
        Ok(())
    }

    fn resize(&mut self, new_size: usize) {
        self.max_size = new_size;
        if !self.groups.is_empty() {
            let n = self.groups.len();
            for (rank, buf) in self.groups.values_mut().enumerate() {
                let quota = new_size / n + usize::from(rank < new_size % n);
                buf.resize(quota);
            }
        }
    }

    fn contents(&self) -> Option<Dataset> {
        let parts: Vec<Dataset> =
            self.groups.values().filter_map(ExemplarsBuffer::contents).collect();
        if parts.is_empty() {
            None
        } else {
            Some(Dataset::concat(&parts).expect("group schemas checked on entry"))
        }
    }

    fn len(&self) -> usize {
        self.groups.values().map(ExemplarsBuffer::len).sum()
    }

    fn group_sizes(&self) -> BTreeMap<K, usize> {
        self.groups.iter().map(|(&k, b)| (k, b.len())).collect()
    }
}

/// Equal share of the budget per target class ever seen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassBalancedBuffer {
    inner: GroupedBuffer<usize>,
}

impl ClassBalancedBuffer {
    pub fn new(max_size: usize, seed: u64) -> Self {
        ClassBalancedBuffer { inner: GroupedBuffer::new(max_size, seed) }
    }

    pub fn group_sizes(&self) -> BTreeMap<usize, usize> {
        self.inner.group_sizes()
    }

    pub fn group_contents(&self, class: usize) -> Option<Dataset> {
        self.inner.groups.get(&class).and_then(ExemplarsBuffer::contents)
    }
}

impl ExemplarsBuffer for ClassBalancedBuffer {
    fn update(&mut self, incoming: &Dataset, _exp_index: usize) -> Result<()> {
        self.inner.update_with(incoming, |ds, i| ds.target(i))
    }

    fn resize(&mut self, new_size: usize) {
        self.inner.resize(new_size);
    }

    fn contents(&self) -> Option<Dataset> {
        self.inner.contents()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn max_size(&self) -> usize {
        self.inner.max_size
    }
}

/// Equal share of the budget per experience ever offered.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperienceBalancedBuffer {
    inner: GroupedBuffer<usize>,
}

impl ExperienceBalancedBuffer {
    pub fn new(max_size: usize, seed: u64) -> Self {
        ExperienceBalancedBuffer { inner: GroupedBuffer::new(max_size, seed) }
    }

    pub fn group_sizes(&self) -> BTreeMap<usize, usize> {
        self.inner.group_sizes()
    }

    pub fn group_contents(&self, exp_index: usize) -> Option<Dataset> {
        self.inner.groups.get(&exp_index).and_then(ExemplarsBuffer::contents)
    }
}

impl ExemplarsBuffer for ExperienceBalancedBuffer {
    fn update(&mut self, incoming: &Dataset, exp_index: usize) -> Result<()> {
        self.inner.update_with(incoming, |_, _| exp_index)
    }

    fn resize(&mut self, new_size: usize) {
        self.inner.resize(new_size);
    }

    fn contents(&self) -> Option<Dataset> {
        self.inner.contents()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn max_size(&self) -> usize {
        self.inner.max_size
    }
}

/// Which policy a replay strategy stores exemplars with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Reservoir,
    ClassBalanced,
    ExperienceBalanced,
}

/// Policy-tagged buffer, serializable as a unit inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StoragePolicy {
    Reservoir(ReservoirBuffer),
    ClassBalanced(ClassBalancedBuffer),
    ExperienceBalanced(ExperienceBalancedBuffer),
}

impl StoragePolicy {
    pub fn new(policy: BufferPolicy, max_size: usize, seed: u64) -> Self {
        match policy {
            BufferPolicy::Reservoir => {
                StoragePolicy::Reservoir(ReservoirBuffer::new(max_size, seed))
            }
            BufferPolicy::ClassBalanced => {
                StoragePolicy::ClassBalanced(ClassBalancedBuffer::new(max_size, seed))
            }
            BufferPolicy::ExperienceBalanced => {
                StoragePolicy::ExperienceBalanced(ExperienceBalancedBuffer::new(max_size, seed))
            }
        }
    }

    fn as_dyn(&self) -> &dyn ExemplarsBuffer {
        match self {
            StoragePolicy::Reservoir(b) => b,
            StoragePolicy::ClassBalanced(b) => b,
            StoragePolicy::ExperienceBalanced(b) => b,
        }
    }

    fn as_dyn_mut(&mut self) -> &mut dyn ExemplarsBuffer {
        match self {
            StoragePolicy::Reservoir(b) => b,
            StoragePolicy::ClassBalanced(b) => b,
            StoragePolicy::ExperienceBalanced(b) => b,
        }
    }
}

impl ExemplarsBuffer for StoragePolicy {
    fn update(&mut self, incoming: &Dataset, exp_index: usize) -> Result<()> {
        self.as_dyn_mut().update(incoming, exp_index)
    }

    fn resize(&mut self, new_size: usize) {
        self.as_dyn_mut().resize(new_size);
    }

    fn contents(&self) -> Option<Dataset> {
        self.as_dyn().contents()
    }

    fn len(&self) -> usize {
        self.as_dyn().len()
    }

    fn max_size(&self) -> usize {
        self.as_dyn().max_size()
    }
}
