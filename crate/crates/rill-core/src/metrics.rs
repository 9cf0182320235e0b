//! Metric accounting: running means, the accuracy matrix, forgetting and
//! backward transfer, and per-experience wall-clock timing.
//!
//! Accuracy states accumulate integer match/total counts and divide once at
//! emission, so every reported accuracy equals an independent per-example
//! recount exactly — no drift from averaging averages. The same mechanism
//! gives example-weighted stream aggregation for free.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Accuracy,
    Loss,
    Time,
}

impl MetricKind {
    /// Short name used in canonical metric names.
    pub fn short(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "Acc",
            MetricKind::Loss => "Loss",
            MetricKind::Time => "Time",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Minibatch,
    Epoch,
    Experience,
    Stream,
}

impl Granularity {
    pub fn short(self) -> &'static str {
        match self {
            Granularity::Minibatch => "MB",
            Granularity::Epoch => "Epoch",
            Granularity::Experience => "Exp",
            Granularity::Stream => "Stream",
        }
    }

    /// Lowercase form used in serialized records.
    pub fn field(self) -> &'static str {
        match self {
            Granularity::Minibatch => "minibatch",
            Granularity::Epoch => "epoch",
            Granularity::Experience => "experience",
            Granularity::Stream => "stream",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// One emitted measurement. `x_axis` is the global training iteration count
/// at emission time; `experience_index` is `None` for stream-granularity
/// values, which aggregate over the whole stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub x_axis: u64,
    pub granularity: Granularity,
    pub phase: Phase,
    pub stream_name: String,
    pub task_label: i64,
    pub experience_index: Option<usize>,
}

/// Weighted running mean; weights are example counts throughout this crate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    sum: f64,
    weight: f64,
}

impl RunningMean {
    pub fn add(&mut self, sum_increment: f64, weight_increment: f64) {
        self.sum += sum_increment;
        self.weight += weight_increment;
    }

    pub fn result(&self) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.sum / self.weight
        }
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn reset(&mut self) {
        *self = RunningMean::default();
    }
}

/// Row argmax with ties broken toward the lowest class id (fixed for
/// cross-run determinism).
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Adds a batch's (matches, examples) to an accuracy state. Targets outside
/// the logit width simply never match — evaluating classes the model has not
/// grown yet is an ordinary miss, not an error.
pub fn accuracy_update(state: &mut RunningMean, logits: &Matrix, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "accuracy: {} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if logits.cols() == 0 && !targets.is_empty() {
        return Err(Error::Shape("accuracy: zero-width logits".into()));
    }
    let mut matches = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if argmax_row(logits.row(i)) == t {
            matches += 1;
        }
    }
    state.add(matches as f64, targets.len() as f64);
    Ok(())
}

/// `R[k, i]`: accuracy on experience `i` after training through experience
/// `k`. Forgetting and backward transfer are derived views of it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "MatrixSnapshot", into = "MatrixSnapshot")]
pub struct AccuracyMatrix {
    entries: BTreeMap<(usize, usize), f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, trained_through: usize, eval_exp: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {acc} outside [0, 1]"
            )));
        }
        self.entries.insert((trained_through, eval_exp), acc);
        Ok(())
    }

    pub fn get(&self, trained_through: usize, eval_exp: usize) -> Option<f64> {
        self.entries.get(&(trained_through, eval_exp)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Highest `trained_through` with any entry.
    pub fn last_trained(&self) -> Option<usize> {
        self.entries.keys().map(|&(k, _)| k).max()
    }

    /// `max_{j <= k-1} R[j, i] - R[k, i]`: how much of the best past
    /// accuracy on `i` has been lost by time `k`. Deliberately unclamped —
    /// negative forgetting (improvement) is meaningful.
    pub fn forgetting(&self, eval_exp: usize, trained_through: usize) -> Result<f64> {
        let now = self.get(trained_through, eval_exp).ok_or_else(|| {
            Error::State(format!(
                "forgetting: R[{trained_through},{eval_exp}] not recorded"
            ))
        })?;
        let best_prior = self
            .entries
            .iter()
            .filter(|&(&(j, i), _)| i == eval_exp && j + 1 <= trained_through)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_prior == f64::NEG_INFINITY {
            return Err(Error::State(format!(
                "forgetting: no R[j,{eval_exp}] with j < {trained_through}"
            )));
        }
        Ok(best_prior - now)
    }

    /// Backward transfer after `n_experiences`: mean over `i < T-1` of
    /// `R[T-1, i] - R[i, i]`. Negative means net forgetting; positive means
    /// later training helped earlier experiences.
    pub fn bwt(&self, n_experiences: usize) -> Result<f64> {
        if n_experiences < 2 {
            return Err(Error::State(format!(
                "bwt needs at least 2 experiences, got {n_experiences}"
            )));
        }
        let last = n_experiences - 1;
        let mut sum = 0.0;
        for i in 0..last {
            let final_acc = self.get(last, i).ok_or_else(|| {
                Error::State(format!("bwt: R[{last},{i}] not recorded"))
            })?;
            let diag = self
                .get(i, i)
                .ok_or_else(|| Error::State(format!("bwt: R[{i},{i}] not recorded")))?;
            sum += final_acc - diag;
        }
        Ok(sum / last as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixSnapshot {
    entries: Vec<(usize, usize, f64)>,
}

impl From<AccuracyMatrix> for MatrixSnapshot {
    fn from(m: AccuracyMatrix) -> Self {
        MatrixSnapshot {
            entries: m.entries.into_iter().map(|((k, i), v)| (k, i, v)).collect(),
        }
    }
}

impl From<MatrixSnapshot> for AccuracyMatrix {
    fn from(s: MatrixSnapshot) -> Self {
        AccuracyMatrix {
            entries: s.entries.into_iter().map(|(k, i, v)| ((k, i), v)).collect(),
        }
    }
}

/// Wall-clock timer around experiences. Nesting is forbidden: experiences
/// are strictly sequential.
#[derive(Debug, Default)]
pub struct ExperienceTimer {
    active: Option<(usize, Instant)>,
}

impl ExperienceTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(&mut self, exp_index: usize) -> Result<()> {
        if let Some((open, _)) = self.active {
            return Err(Error::State(format!(
                "timer already running for experience {open}"
            )));
        }
        self.active = Some((exp_index, Instant::now()));
        Ok(())
    }

    /// Seconds since the matching `start`.
    pub fn stop(&mut self, exp_index: usize) -> Result<f64> {
        match self.active.take() {
            Some((open, at)) if open == exp_index => Ok(at.elapsed().as_secs_f64()),
            Some((open, at)) => {
                self.active = Some((open, at));
                Err(Error::State(format!(
                    "timer running for experience {open}, not {exp_index}"
                )))
            }
            None => Err(Error::State(format!(
                "stop without start for experience {exp_index}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean_weighted_and_reset() {
        let mut m = RunningMean::default();
        m.add(10.0, 10.0); // 10 matches of 10
        m.add(15.0, 30.0); // 15 of 30
        assert!((m.result() - 0.625).abs() < 1e-15);
        m.reset();
        assert_eq!(m.result(), 0.0);
        assert_eq!(m.weight(), 0.0);
    }

    #[test]
    fn accuracy_basic_and_tie_break() {
        let mut m = RunningMean::default();
        let logits = Matrix::from_vec(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        accuracy_update(&mut m, &logits, &[0, 0]).unwrap();
        assert!((m.result() - 0.5).abs() < 1e-15);

        // Tie goes to the lowest class id.
        let mut m = RunningMean::default();
        let tied = Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        accuracy_update(&mut m, &tied, &[0]).unwrap();
        assert_eq!(m.result(), 1.0);
        let mut m = RunningMean::default();
        accuracy_update(&mut m, &tied, &[1]).unwrap();
        assert_eq!(m.result(), 0.0);
    }

    #[test]
    fn accuracy_target_beyond_width_is_a_miss() {
        let mut m = RunningMean::default();
        let logits = Matrix::from_vec(2, 2, vec![9.0, 1.0, 1.0, 9.0]).unwrap();
        accuracy_update(&mut m, &logits, &[0, 7]).unwrap();
        assert!((m.result() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn accuracy_matches_brute_force_recount() {
        use rand::Rng;
        let mut rng = crate::rng::named_stream(0, "acc-oracle");
        for _ in 0..50 {
            let b = rng.gen_range(1..20);
            let c = rng.gen_range(1..6);
            let logits = Matrix::from_vec(
                b,
                c,
                (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let mut m = RunningMean::default();
            accuracy_update(&mut m, &logits, &targets).unwrap();

            let mut hits = 0usize;
            for (i, &t) in targets.iter().enumerate() {
                let row = logits.row(i);
                let mut best = 0;
                let mut best_v = row[0];
                for (j, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                if best == t {
                    hits += 1;
                }
            }
            assert_eq!(m.result(), hits as f64 / b as f64);
        }
    }

    #[test]
    fn accuracy_shape_validation() {
        let mut m = RunningMean::default();
        let logits = Matrix::zeros(2, 3);
        assert_eq!(
            accuracy_update(&mut m, &logits, &[0]).unwrap_err().kind(),
            "shape-error"
        );
    }

    #[test]
    fn forgetting_formula() {
        let mut r = AccuracyMatrix::new();
        r.record(0, 0, 0.9).unwrap();
        r.record(1, 0, 0.5).unwrap();
        assert!((r.forgetting(0, 1).unwrap() - 0.4).abs() < 1e-15);

        // Improvement shows as negative forgetting, unclamped.
        let mut r = AccuracyMatrix::new();
        r.record(0, 0, 0.5).unwrap();
        r.record(1, 0, 0.8).unwrap();
        assert!((r.forgetting(0, 1).unwrap() + 0.3).abs() < 1e-15);

        // Max over all prior rows, not just the diagonal.
        let mut r = AccuracyMatrix::new();
        r.record(0, 0, 0.6).unwrap();
        r.record(1, 0, 0.9).unwrap();
        r.record(2, 0, 0.7).unwrap();
        assert!((r.forgetting(0, 2).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn forgetting_missing_entries() {
        let mut r = AccuracyMatrix::new();
        r.record(1, 0, 0.5).unwrap();
        assert_eq!(r.forgetting(0, 1).unwrap_err().kind(), "state-error");
        assert_eq!(r.forgetting(1, 1).unwrap_err().kind(), "state-error");
    }

    #[test]
    fn bwt_hand_computed_three_by_three() {
        let mut r = AccuracyMatrix::new();
        // Diagonal: 0.90, 0.80, 0.85; final row: 0.60, 0.70, 0.85.
        r.record(0, 0, 0.90).unwrap();
        r.record(1, 1, 0.80).unwrap();
        r.record(2, 0, 0.60).unwrap();
        r.record(2, 1, 0.70).unwrap();
        r.record(2, 2, 0.85).unwrap();
        // ((0.60-0.90) + (0.70-0.80)) / 2 = -0.20
        assert!((r.bwt(3).unwrap() + 0.20).abs() < 1e-12);
    }

    #[test]
    fn constant_model_zero_forgetting_and_bwt() {
        let mut r = AccuracyMatrix::new();
        for k in 0..3 {
            for i in 0..3 {
                r.record(k, i, 0.7).unwrap();
            }
        }
        assert_eq!(r.forgetting(0, 2).unwrap(), 0.0);
        assert_eq!(r.bwt(3).unwrap(), 0.0);
    }

    #[test]
    fn bwt_missing_entries_and_degenerate_t() {
        let r = AccuracyMatrix::new();
        assert_eq!(r.bwt(1).unwrap_err().kind(), "state-error");
        assert_eq!(r.bwt(3).unwrap_err().kind(), "state-error");
    }

    #[test]
    fn record_validates_range() {
        let mut r = AccuracyMatrix::new();
        assert_eq!(r.record(0, 0, 1.5).unwrap_err().kind(), "invalid-argument");
        assert_eq!(r.record(0, 0, -0.1).unwrap_err().kind(), "invalid-argument");
    }

    #[test]
    fn matrix_serde_round_trip() {
        let mut r = AccuracyMatrix::new();
        r.record(0, 0, 0.25).unwrap();
        r.record(1, 0, 0.125).unwrap();
        r.record(1, 1, 1.0).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: AccuracyMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn timer_lifecycle_and_misuse() {
        let mut t = ExperienceTimer::new();
        t.start(0).unwrap();
        let s = t.stop(0).unwrap();
        assert!((0.0..0.1).contains(&s));

        t.start(1).unwrap();
        assert_eq!(t.start(2).unwrap_err().kind(), "state-error");
        assert_eq!(t.stop(3).unwrap_err().kind(), "state-error");
        assert!(t.stop(1).unwrap() >= 0.0);
        assert_eq!(t.stop(1).unwrap_err().kind(), "state-error");
    }
}
