//! Drives a full experiment from a parsed config: build the benchmark and
//! model, train experience by experience, evaluate the covered test stream
//! after each, and checkpoint at experience boundaries.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::benchmarks::{self, Benchmark, SplitSyntheticSpec};
use crate::error::{Error, Result};
use crate::logging::{CsvLogger, EvaluationPlugin, JsonlLogger, Logger, TextLogger};
use crate::metrics::{AccuracyMatrix, Granularity};
use crate::models::Model;
use crate::training::{self, Hyperparams, Strategy};

use super::checkpoint::{
    Checkpoint, MetaSection, OptimizerSection, ProgressSection, RngSection,
};
use super::config::{
    config_digest, ExperimentConfig, HeadKind, LoggerKind, StrategyConfig,
};

pub const CSV_FILE: &str = "metrics.csv";
pub const JSONL_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the config's checkpoint instead of starting fresh.
    pub resume: bool,
    /// Train at most this many experiences in this invocation.
    pub max_experiences: Option<usize>,
    /// Write metric files here instead of the config's `output_dir`.
    /// The checkpoint path is not affected.
    pub output_override: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Experiences the model has been trained on in total, including
    /// sessions before a resume.
    pub experiences_trained: usize,
    /// Test-stream accuracy from the last evaluation of this invocation.
    pub final_stream_accuracy: Option<f64>,
    pub matrix: AccuracyMatrix,
    pub output_dir: PathBuf,
}

pub fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    if let Some(s) = &cfg.benchmark.split_synthetic {
        return benchmarks::split_synthetic(
            &SplitSyntheticSpec {
                n_classes: s.n_classes,
                n_per_class: s.n_per_class,
                n_per_class_test: s.n_per_class_test,
                dim: s.dim,
                spread: s.spread,
                n_experiences: s.n_experiences,
                task_labels: s.task_labels,
            },
            cfg.seed,
        );
    }
    if let Some(m) = &cfg.benchmark.split_mnist {
        return benchmarks::split_mnist(
            m.n_experiences,
            &m.data_dir,
            cfg.seed,
            m.fixed_class_order.clone(),
        );
    }
    if let Some(i) = &cfg.benchmark.instance_incremental {
        let (train, test) = benchmarks::gaussian_blobs_split(
            i.n_classes,
            i.n_per_class,
            i.n_per_class_test.unwrap_or(i.n_per_class),
            i.dim,
            i.spread,
            cfg.seed,
        )?;
        return benchmarks::instance_incremental(&train, &test, i.n_experiences, cfg.seed);
    }
    Err(Error::Config("benchmark names no generator".into()))
}

fn build_model(cfg: &ExperimentConfig, input_dim: usize) -> Result<Model> {
    let mut layout = Vec::with_capacity(cfg.model.hidden.len() + 1);
    layout.push(input_dim);
    layout.extend_from_slice(&cfg.model.hidden);
    match cfg.model.head {
        HeadKind::Incremental => Model::incremental(&layout, cfg.model.masking, cfg.seed),
        HeadKind::Multihead => Model::multihead(&layout, cfg.model.masking, cfg.seed),
    }
}

fn build_loggers(
    cfg: &ExperimentConfig,
    output_dir: &std::path::Path,
    resume_offsets: Option<&BTreeMap<String, u64>>,
) -> Result<Vec<Box<dyn Logger>>> {
    let mut out: Vec<Box<dyn Logger>> = Vec::new();
    for kind in &cfg.loggers {
        match kind {
            LoggerKind::Text => out.push(Box::new(TextLogger::stdout())),
            LoggerKind::Csv => {
                let path = output_dir.join(CSV_FILE);
                let logger = match resume_offsets {
                    None => CsvLogger::create(&path)?,
                    Some(offsets) => {
                        let off = logger_offset(offsets, "csv")?;
                        CsvLogger::resume(&path, off)?
                    }
                };
                out.push(Box::new(logger));
            }
            LoggerKind::Jsonl => {
                let path = output_dir.join(JSONL_FILE);
                let logger = match resume_offsets {
                    None => JsonlLogger::create(&path)?,
                    Some(offsets) => {
                        let off = logger_offset(offsets, "jsonl")?;
                        JsonlLogger::resume(&path, off)?
                    }
                };
                out.push(Box::new(logger));
            }
        }
    }
    Ok(out)
}

fn logger_offset(offsets: &BTreeMap<String, u64>, name: &str) -> Result<u64> {
    offsets.get(name).copied().ok_or_else(|| {
        Error::CheckpointMismatch(format!("checkpoint has no byte offset for logger {name:?}"))
    })
}

fn build_strategy(
    cfg: &ExperimentConfig,
    model: Model,
    evaluator: EvaluationPlugin,
) -> Result<Strategy> {
    let hyper = Hyperparams {
        lr: cfg.train.lr,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
    };
    let seed = cfg.seed;
    match &cfg.strategy {
        StrategyConfig::Naive => training::make_naive(model, hyper, seed, evaluator),
        StrategyConfig::Cumulative => training::make_cumulative(model, hyper, seed, evaluator),
        StrategyConfig::Replay { mem_size, policy } => {
            training::make_replay(model, hyper, seed, evaluator, *policy, *mem_size)
        }
        StrategyConfig::Ewc {
            lambda,
            fisher_batches,
        } => training::make_ewc(model, hyper, seed, evaluator, *lambda, *fisher_batches),
        StrategyConfig::Lwf { alpha, temperature } => {
            training::make_lwf(model, hyper, seed, evaluator, *alpha, *temperature)
        }
    }
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let digest = config_digest(cfg)?;

    // Load and verify any checkpoint before touching output files, so a
    // mismatched resume cannot truncate a healthy run's logs.
    let restored = if opts.resume {
        let ck_cfg = cfg.checkpoint.as_ref().ok_or_else(|| {
            Error::Config("resume requested but the config has no [checkpoint] table".into())
        })?;
        let ck = Checkpoint::read(&ck_cfg.path)?;
        if ck.meta.config_digest != digest {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint belongs to a different config \
                 (its digest {}, this config {digest})",
                ck.meta.config_digest
            )));
        }
        if ck.optimizer.kind != "sgd" {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported optimizer {:?} in checkpoint",
                ck.optimizer.kind
            )));
        }
        Some(ck)
    } else {
        None
    };

    let benchmark = build_benchmark(cfg)?;
    let first = benchmark
        .train_stream
        .experiences
        .first()
        .ok_or_else(|| Error::State("benchmark has no training experiences".into()))?;
    let input_dim = first.dataset.feature_dim();

    let output_dir = opts
        .output_override
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&output_dir)?;

    let loggers = build_loggers(
        cfg,
        &output_dir,
        restored.as_ref().map(|ck| &ck.loggers),
    )?;
    let evaluator = EvaluationPlugin::new(loggers);

    let model = build_model(cfg, input_dim)?;
    let mut strategy = build_strategy(cfg, model, evaluator)?;

    let mut next_experience = 0usize;
    if let Some(ck) = &restored {
        strategy.state.model = serde_json::from_value(ck.model.clone())?;
        strategy.state.shuffle_rng = ck.rng.shuffle_rng.clone();
        strategy.state.clock = ck.progress.clock;
        strategy.state.history = benchmark.train_stream.experiences
            [..ck.progress.next_experience.min(benchmark.train_stream.experiences.len())]
            .iter()
            .map(|e| e.dataset.clone())
            .collect();
        let plugin_snaps: BTreeMap<String, serde_json::Value> =
            serde_json::from_value(ck.plugins.clone())?;
        strategy.plugins_restore(&plugin_snaps)?;
        strategy.evaluator.restore(&ck.evaluator)?;
        next_experience = ck.progress.next_experience;
    }

    let total = benchmark.train_stream.experiences.len();
    if next_experience > total {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint says {next_experience} experiences are done \
             but the benchmark has only {total}"
        )));
    }
    let stop = match opts.max_experiences {
        Some(m) => total.min(next_experience + m),
        None => total,
    };

    let mut last_stream_acc = None;
    for idx in next_experience..stop {
        strategy.train(std::slice::from_ref(&benchmark.train_stream.experiences[idx]))?;

        let subset = strategy.covered_subset(&benchmark.test_stream);
        let metrics = strategy.eval(&subset)?;
        last_stream_acc = metrics
            .iter()
            .rev()
            .find(|m| m.granularity == Granularity::Stream && m.name.starts_with("Acc_"))
            .map(|m| m.value);

        if let Some(ck_cfg) = &cfg.checkpoint {
            let done = idx + 1;
            // Honor the cadence, and always leave a checkpoint at the point
            // this invocation stops so a resume can pick up exactly here.
            if done % ck_cfg.save_every_exp == 0 || done == stop {
                let ck = Checkpoint {
                    meta: MetaSection {
                        config_digest: digest.clone(),
                    },
                    progress: ProgressSection {
                        next_experience: done,
                        clock: strategy.state.clock,
                    },
                    rng: RngSection {
                        shuffle_rng: strategy.state.shuffle_rng.clone(),
                    },
                    model: serde_json::to_value(&strategy.state.model)?,
                    optimizer: OptimizerSection {
                        kind: "sgd".into(),
                        lr: cfg.train.lr,
                    },
                    plugins: serde_json::to_value(strategy.plugins_snapshot()?)?,
                    evaluator: strategy.evaluator.snapshot()?,
                    loggers: strategy.evaluator.byte_offsets()?,
                };
                ck.write_atomic(&ck_cfg.path)?;
            }
        }
    }

    strategy.evaluator.close()?;
    Ok(RunOutcome {
        experiences_trained: stop,
        final_stream_accuracy: last_stream_acc,
        matrix: strategy.evaluator.matrix().clone(),
        output_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn base_config(dir: &Path, strategy: &str, extra: &str) -> ExperimentConfig {
        let out = dir.join("out").display().to_string();
        let ckpt = dir.join("run.ckpt").display().to_string();
        let toml = format!(
            r#"
            seed = 7
            output_dir = "{out}"
            loggers = ["csv", "jsonl"]

            [benchmark.split_synthetic]
            n_classes = 4
            n_experiences = 2
            n_per_class = 10
            n_per_class_test = 5
            dim = 4
            spread = 0.3
            {extra}

            [model]
            hidden = [16]
            head = "incremental"

            [strategy]
            {strategy}

            [train]
            lr = 0.1
            epochs = 2
            batch_size = 8

            [checkpoint]
            path = "{ckpt}"
            "#
        );
        ExperimentConfig::from_toml_str(&toml).unwrap()
    }

    #[test]
    fn fresh_run_trains_evaluates_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path(), "name = \"naive\"", "");
        let outcome = run(&cfg, &RunOptions::default()).unwrap();

        assert_eq!(outcome.experiences_trained, 2);
        let acc = outcome.final_stream_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        // Incremental head covers every task, so each eval sees both test
        // experiences: full 2x2 accuracy matrix.
        for k in 0..2 {
            for i in 0..2 {
                assert!(outcome.matrix.get(k, i).is_some(), "missing ({k},{i})");
            }
        }

        let csv = std::fs::read_to_string(outcome.output_dir.join(CSV_FILE)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "name,phase,stream,task,experience,granularity,x_axis,value"
        );
        let rows: Vec<&str> = lines.collect();
        assert!(!rows.is_empty());
        for row in &rows {
            assert_eq!(row.split(',').count(), 8, "row {row}");
        }

        let jsonl = std::fs::read_to_string(outcome.output_dir.join(JSONL_FILE)).unwrap();
        let json_lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(json_lines.len(), rows.len());
        for line in &json_lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("name").is_some());
        }

        // Checkpoint from the completed run says everything is done.
        let ck = Checkpoint::read(&cfg.checkpoint.as_ref().unwrap().path).unwrap();
        assert_eq!(ck.progress.next_experience, 2);
        assert_eq!(ck.optimizer.kind, "sgd");
    }

    #[test]
    fn interrupted_and_resumed_run_matches_uninterrupted_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        // Replay exercises plugin snapshot/restore through the checkpoint.
        let strategy = "name = \"replay\"\nmem_size = 8";
        let cfg_a = base_config(dir_a.path(), strategy, "");
        let cfg_b = base_config(dir_b.path(), strategy, "");

        let full = run(&cfg_a, &RunOptions::default()).unwrap();

        let half = run(
            &cfg_b,
            &RunOptions {
                max_experiences: Some(1),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(half.experiences_trained, 1);
        let resumed = run(
            &cfg_b,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.experiences_trained, 2);

        for file in [CSV_FILE, JSONL_FILE] {
            let a = std::fs::read(full.output_dir.join(file)).unwrap();
            let b = std::fs::read(resumed.output_dir.join(file)).unwrap();
            assert_eq!(a, b, "{file} bytes diverge after resume");
        }
        assert_eq!(
            serde_json::to_value(&full.matrix).unwrap(),
            serde_json::to_value(&resumed.matrix).unwrap()
        );
        assert_eq!(full.final_stream_accuracy, resumed.final_stream_accuracy);
    }

    #[test]
    fn resume_without_checkpoint_table_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path(), "name = \"naive\"", "");
        cfg.checkpoint = None;
        let err = run(
            &cfg,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.kind(), "config-error");
    }

    #[test]
    fn resume_rejects_other_configs_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path(), "name = \"naive\"", "");
        run(&cfg, &RunOptions::default()).unwrap();

        // Same checkpoint path, different experiment: digest must not match.
        let mut other = cfg.clone();
        other.seed = 8;
        let err = run(
            &other,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.kind(), "checkpoint-mismatch");
        assert!(err.to_string().contains("different config"));

        // The intact files from the first run were not truncated by the
        // failed resume.
        let csv = std::fs::read_to_string(cfg.output_dir.join(CSV_FILE)).unwrap();
        assert!(csv.lines().count() > 1);
    }

    #[test]
    fn max_experiences_caps_each_invocation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path(), "name = \"cumulative\"", "");
        let first = run(
            &cfg,
            &RunOptions {
                max_experiences: Some(1),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(first.experiences_trained, 1);
        // Only the first training row of the matrix exists so far.
        assert!(first.matrix.get(0, 0).is_some());
        assert!(first.matrix.get(1, 1).is_none());

        let ck = Checkpoint::read(&cfg.checkpoint.as_ref().unwrap().path).unwrap();
        assert_eq!(ck.progress.next_experience, 1);

        // A generous cap trains only what remains.
        let rest = run(
            &cfg,
            &RunOptions {
                resume: true,
                max_experiences: Some(5),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rest.experiences_trained, 2);
        assert!(rest.matrix.get(1, 1).is_some());
    }

    #[test]
    fn multihead_run_evaluates_only_adapted_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out").display().to_string();
        let toml = format!(
            r#"
            seed = 11
            output_dir = "{out}"
            loggers = ["csv"]

            [benchmark.split_synthetic]
            n_classes = 4
            n_experiences = 2
            n_per_class = 10
            n_per_class_test = 5
            dim = 4
            spread = 0.3
            task_labels = true

            [model]
            hidden = [16]
            head = "multihead"

            [strategy]
            name = "naive"

            [train]
            lr = 0.1
            epochs = 2
            batch_size = 8
            "#
        );
        let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
        let outcome = run(&cfg, &RunOptions::default()).unwrap();

        // After the first experience only task 0's head exists, so the first
        // eval covers one test experience; the unseen pair never appears.
        assert!(outcome.matrix.get(0, 0).is_some());
        assert!(outcome.matrix.get(0, 1).is_none());
        assert!(outcome.matrix.get(1, 0).is_some());
        assert!(outcome.matrix.get(1, 1).is_some());
    }

    #[test]
    fn output_override_redirects_metric_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path(), "name = \"naive\"", "");
        let elsewhere = dir.path().join("elsewhere");
        let outcome = run(
            &cfg,
            &RunOptions {
                output_override: Some(elsewhere.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(outcome.output_dir, elsewhere);
        assert!(elsewhere.join(CSV_FILE).exists());
        assert!(!cfg.output_dir.join(CSV_FILE).exists());
    }
}
