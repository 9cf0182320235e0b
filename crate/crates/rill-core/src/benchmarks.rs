//! Benchmark construction: carving datasets into streams of experiences.
//!
//! A benchmark is a paired train/test stream. Class-incremental splits give
//! each experience a disjoint slice of the label space (the setting where
//! forgetting bites hardest); instance-incremental splits keep all classes
//! but mete out the examples. Synthetic Gaussian-blob data makes both cheap
//! enough for tests and quick experiments.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::idx;
use crate::matrix::Matrix;
use crate::rng;

/// One element of a stream: a dataset plus its position and label metadata.
#[derive(Clone, Debug)]
pub struct Experience {
    pub index: usize,
    pub stream_name: String,
    pub task_label: i64,
    pub dataset: Dataset,
    /// Classes present in this experience's dataset, ascending.
    pub classes_in_this_experience: Vec<usize>,
}

impl Experience {
    /// Stable identifier, e.g. `train/002`.
    pub fn uid(&self) -> String {
        format!("{}/{:03}", self.stream_name, self.index)
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub name: String,
    pub experiences: Vec<Experience>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train_stream: Stream,
    pub test_stream: Stream,
}

impl Benchmark {
    pub fn n_experiences(&self) -> usize {
        self.train_stream.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ClassIncrementalOptions {
    /// Shuffles the class order; ignored when `fixed_class_order` is given.
    pub seed: u64,
    /// Exact class order to split over; must be a permutation of the classes
    /// present in the data.
    pub fixed_class_order: Option<Vec<usize>>,
    /// When true, experience `i` carries task label `i` (for multi-head
    /// models); otherwise every experience is task 0.
    pub task_labels: bool,
}

/// Splits `train`/`test` into `n_experiences` class-disjoint experiences.
///
/// The class universe is permuted (seeded, or fixed via options) and divided
/// into equal contiguous groups; experience `i` holds exactly the examples
/// of group `i`, in original dataset order. Train and test must agree on the
/// class universe, and the group size must divide it evenly.
pub fn class_incremental(
    train: &Dataset,
    test: &Dataset,
    n_experiences: usize,
    options: &ClassIncrementalOptions,
) -> Result<Benchmark> {
    if n_experiences == 0 {
        return Err(Error::InvalidArgument("n_experiences must be >= 1".into()));
    }
    let classes = train.classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if test.classes() != classes {
        return Err(Error::InvalidArgument(format!(
            "train and test class sets differ: {:?} vs {:?}",
            classes,
            test.classes()
        )));
    }
    if classes.len() % n_experiences != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot split into {n_experiences} equal experiences",
            classes.len()
        )));
    }

    let order: Vec<usize> = match &options.fixed_class_order {
        Some(fixed) => {
            let as_set: BTreeSet<usize> = fixed.iter().copied().collect();
            if fixed.len() != classes.len() || !as_set.iter().eq(classes.iter()) {
                return Err(Error::InvalidArgument(format!(
                    "fixed_class_order {fixed:?} is not a permutation of {classes:?}"
                )));
            }
            fixed.clone()
        }
        None => {
            let mut order = classes.clone();
            order.shuffle(&mut rng::named_stream(options.seed, "class-order"));
            order
        }
    };

    let group = classes.len() / n_experiences;
    let mut train_exps = Vec::with_capacity(n_experiences);
    let mut test_exps = Vec::with_capacity(n_experiences);
    for i in 0..n_experiences {
        let mut slice: Vec<usize> = order[i * group..(i + 1) * group].to_vec();
        slice.sort_unstable();
        let task = if options.task_labels { i as i64 } else { 0 };
        train_exps.push(carve(train, "train", i, task, &slice)?);
        test_exps.push(carve(test, "test", i, task, &slice)?);
    }
    Ok(Benchmark {
        train_stream: Stream { name: "train".into(), experiences: train_exps },
        test_stream: Stream { name: "test".into(), experiences: test_exps },
    })
}

fn carve(
    ds: &Dataset,
    stream: &str,
    index: usize,
    task: i64,
    classes: &[usize],
) -> Result<Experience> {
    let wanted: BTreeSet<usize> = classes.iter().copied().collect();
    let indices: Vec<usize> =
        (0..ds.len()).filter(|&i| wanted.contains(&ds.target(i))).collect();
    let subset = ds.subsample(&indices)?;
    let dataset = subset.with_attribute(crate::data::TASK_LABEL_ATTR, vec![task; indices.len()])?;
    Ok(Experience {
        index,
        stream_name: stream.to_string(),
        task_label: task,
        dataset,
        classes_in_this_experience: classes.to_vec(),
    })
}

/// Splits `train` into `n_experiences` near-equal shuffled slices, all
/// classes throughout. Earlier experiences absorb the remainder, so sizes
/// differ by at most one. Each test experience is the full test set.
pub fn instance_incremental(
    train: &Dataset,
    test: &Dataset,
    n_experiences: usize,
    seed: u64,
) -> Result<Benchmark> {
    if n_experiences == 0 {
        return Err(Error::InvalidArgument("n_experiences must be >= 1".into()));
    }
    if train.len() < n_experiences {
        return Err(Error::InvalidArgument(format!(
            "{} examples cannot fill {n_experiences} experiences",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::named_stream(seed, "instance-shuffle"));

    let base = train.len() / n_experiences;
    let rem = train.len() % n_experiences;
    let mut train_exps = Vec::with_capacity(n_experiences);
    let mut test_exps = Vec::with_capacity(n_experiences);
    let mut at = 0;
    for i in 0..n_experiences {
        let take = base + usize::from(i < rem);
        let slice = &order[at..at + take];
        at += take;
        let dataset = train.subsample(slice)?;
        let classes = dataset.classes();
        train_exps.push(Experience {
            index: i,
            stream_name: "train".into(),
            task_label: 0,
            dataset,
            classes_in_this_experience: classes,
        });
        test_exps.push(Experience {
            index: i,
            stream_name: "test".into(),
            task_label: 0,
            dataset: test.clone(),
            classes_in_this_experience: test.classes(),
        });
    }
    Ok(Benchmark {
        train_stream: Stream { name: "train".into(), experiences: train_exps },
        test_stream: Stream { name: "test".into(), experiences: test_exps },
    })
}

/// Isotropic Gaussian clusters: class `c` is `n_per_class` draws of
/// `center_c + spread * N(0, I)`, centers sitting on the radius-5 sphere.
pub fn gaussian_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let (train, _) = gaussian_blobs_split(n_classes, n_per_class, 1, dim, spread, seed)?;
    Ok(train)
}

/// Paired train/test blob datasets drawn around the *same* class centers, so
/// test accuracy measures the decision boundary, not memorization.
pub fn gaussian_blobs_split(
    n_classes: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_classes == 0 || n_train_per_class == 0 || n_test_per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "blob counts and dimension must all be >= 1".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::InvalidArgument(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut r = rng::named_stream(seed, "blob-data");
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| 5.0 * v / norm).collect()
        })
        .collect();

    let draw = |per_class: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<Dataset> {
        let n = n_classes * per_class;
        let mut features = Matrix::zeros(n, dim);
        let mut targets = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for k in 0..per_class {
                let row = features.row_mut(c * per_class + k);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = center[j] + spread * rng::standard_normal(r);
                }
                targets.push(c);
            }
        }
        Dataset::new(features, targets)
    };
    let train = draw(n_train_per_class, &mut r)?;
    let test = draw(n_test_per_class, &mut r)?;
    Ok((train, test))
}

/// Parameters for [`split_synthetic`].
#[derive(Clone, Debug)]
pub struct SplitSyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Test examples per class; defaults to `n_per_class` when `None`.
    pub n_per_class_test: Option<usize>,
    pub dim: usize,
    pub spread: f64,
    pub n_experiences: usize,
    pub task_labels: bool,
}

/// Class-incremental benchmark over freshly drawn Gaussian blobs: the fully
/// self-contained way to exercise forgetting without any data on disk.
pub fn split_synthetic(spec: &SplitSyntheticSpec, seed: u64) -> Result<Benchmark> {
    let (train, test) = gaussian_blobs_split(
        spec.n_classes,
        spec.n_per_class,
        spec.n_per_class_test.unwrap_or(spec.n_per_class),
        spec.dim,
        spec.spread,
        seed,
    )?;
    class_incremental(
        &train,
        &test,
        spec.n_experiences,
        &ClassIncrementalOptions { seed, fixed_class_order: None, task_labels: spec.task_labels },
    )
}

/// Class-incremental MNIST from IDX files in `data_dir` (standard file
/// names; see `fetch-mnist` in the CLI for obtaining them).
pub fn split_mnist(
    n_experiences: usize,
    data_dir: &Path,
    seed: u64,
    fixed_class_order: Option<Vec<usize>>,
) -> Result<Benchmark> {
    let train = idx::load_idx(
        &data_dir.join("train-images-idx3-ubyte"),
        &data_dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = idx::load_idx(
        &data_dir.join("t10k-images-idx3-ubyte"),
        &data_dir.join("t10k-labels-idx1-ubyte"),
    )?;
    class_incremental(
        &train,
        &test,
        n_experiences,
        &ClassIncrementalOptions { seed, fixed_class_order, task_labels: false },
    )
}
