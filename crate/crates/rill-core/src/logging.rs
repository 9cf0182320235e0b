//! Metric naming, log sinks, and the evaluator that drives them.
//!
//! Names are canonical and fully determined by (kind, granularity, phase,
//! stream, task, experience), so two runs of the same experiment produce the
//! same names in the same order. CSV and JSONL sinks are byte-deterministic:
//! floats are written as `{:.16e}` (17 significant digits, exact round-trip)
//! and wall-clock timing never reaches them — timing appears only in the
//! human-readable text summaries.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{
    accuracy_update, AccuracyMatrix, ExperienceTimer, Granularity, MetricKind, MetricValue, Phase,
    RunningMean,
};

/// Canonical metric name:
/// `<Kind>_<Gran>/<phase>_phase/<stream>_stream/Task<task:03>/Exp<exp:03>`.
///
/// Stream-granularity values aggregate over the full stream, so they drop the
/// `Exp` segment and pin the task segment to `Task000`. For every other
/// granularity `experience_index` must be present.
pub fn canonical_name(
    kind: MetricKind,
    gran: Granularity,
    phase: Phase,
    stream: &str,
    task_label: i64,
    experience_index: Option<usize>,
) -> String {
    if gran == Granularity::Stream {
        return format!(
            "{}_{}/{}_phase/{}_stream/Task000",
            kind.short(),
            gran.short(),
            phase.as_str(),
            stream
        );
    }
    let exp = experience_index.expect("non-stream metric names need an experience index");
    format!(
        "{}_{}/{}_phase/{}_stream/Task{:03}/Exp{:03}",
        kind.short(),
        gran.short(),
        phase.as_str(),
        stream,
        task_label,
        exp
    )
}

/// `{:.16e}` — fixed-width scientific, 17 significant digits. Valid in both
/// CSV and JSON, and parses back to the identical f64.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A metric sink. `log_metric` receives every emission; the summary hooks
/// receive human-oriented one-liners (including timing) that structured
/// sinks ignore. `byte_offset` is `Some` for file-backed sinks and feeds
/// checkpoint/resume truncation.
pub trait Logger {
    fn name(&self) -> &str;
    fn log_metric(&mut self, value: &MetricValue) -> Result<()>;
    fn on_training_exp_end(&mut self, _summary: &str) -> Result<()> {
        Ok(())
    }
    fn on_eval_end(&mut self, _summary: &str) -> Result<()> {
        Ok(())
    }
    fn byte_offset(&mut self) -> Result<Option<u64>>;
    fn close(&mut self) -> Result<()>;
}

/// Append-only buffered file shared by the CSV and JSONL sinks.
struct FileSink {
    writer: BufWriter<File>,
}

impl FileSink {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(FileSink {
            writer: BufWriter::new(file),
        })
    }

    /// Reopens an existing file, truncating everything past `offset` —
    /// rows written after the checkpoint being resumed are discarded so the
    /// resumed run re-emits them identically.
    fn resume(path: &Path, offset: u64) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len < offset {
            return Err(Error::State(format!(
                "{}: file is {len} bytes but the checkpoint recorded {offset}",
                path.display()
            )));
        }
        file.set_len(offset)?;
        let mut writer = BufWriter::new(file);
        writer.seek(SeekFrom::End(0))?;
        Ok(FileSink { writer })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    fn offset(&mut self) -> Result<u64> {
        self.writer.flush()?;
        Ok(self.writer.get_mut().stream_position()?)
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub const CSV_HEADER: &str = "name,phase,stream,task,experience,granularity,x_axis,value";

/// One row per metric value. The experience column is empty for
/// stream-granularity rows.
pub struct CsvLogger {
    sink: FileSink,
}

impl CsvLogger {
    pub fn create(path: &Path) -> Result<Self> {
        let mut sink = FileSink::create(path)?;
        sink.write_line(CSV_HEADER)?;
        Ok(CsvLogger { sink })
    }

    pub fn resume(path: &Path, offset: u64) -> Result<Self> {
        Ok(CsvLogger {
            sink: FileSink::resume(path, offset)?,
        })
    }
}

impl Logger for CsvLogger {
    fn name(&self) -> &str {
        "csv"
    }

    fn log_metric(&mut self, v: &MetricValue) -> Result<()> {
        let exp = v
            .experience_index
            .map(|e| e.to_string())
            .unwrap_or_default();
        let line = format!(
            "{},{},{},{},{},{},{},{}",
            csv_field(&v.name),
            v.phase.as_str(),
            csv_field(&v.stream_name),
            v.task_label,
            exp,
            v.granularity.field(),
            v.x_axis,
            fmt_value(v.value)
        );
        self.sink.write_line(&line)
    }

    fn byte_offset(&mut self) -> Result<Option<u64>> {
        Ok(Some(self.sink.offset()?))
    }

    fn close(&mut self) -> Result<()> {
        self.sink.flush()
    }
}

/// One JSON object per line, same fields as the CSV columns; `experience`
/// is `null` for stream rows. Lines are hand-assembled so the byte stream
/// (including the `{:.16e}` value text) is reproducible.
pub struct JsonlLogger {
    sink: FileSink,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlLogger {
            sink: FileSink::create(path)?,
        })
    }

    pub fn resume(path: &Path, offset: u64) -> Result<Self> {
        Ok(JsonlLogger {
            sink: FileSink::resume(path, offset)?,
        })
    }
}

impl Logger for JsonlLogger {
    fn name(&self) -> &str {
        "jsonl"
    }

    fn log_metric(&mut self, v: &MetricValue) -> Result<()> {
        let exp = v
            .experience_index
            .map(|e| e.to_string())
            .unwrap_or_else(|| "null".to_string());
        let line = format!(
            "{{\"name\":{},\"phase\":\"{}\",\"stream\":{},\"task\":{},\"experience\":{},\"granularity\":\"{}\",\"x_axis\":{},\"value\":{}}}",
            serde_json::to_string(&v.name)?,
            v.phase.as_str(),
            serde_json::to_string(&v.stream_name)?,
            v.task_label,
            exp,
            v.granularity.field(),
            v.x_axis,
            fmt_value(v.value)
        );
        self.sink.write_line(&line)
    }

    fn byte_offset(&mut self) -> Result<Option<u64>> {
        Ok(Some(self.sink.offset()?))
    }

    fn close(&mut self) -> Result<()> {
        self.sink.flush()
    }
}

/// Human-readable progress. Only coarse (experience and stream) values are
/// shown; minibatch/epoch spam stays in the structured sinks. Not resumable
/// and not part of any determinism contract.
pub struct TextLogger {
    out: Box<dyn Write>,
}

impl TextLogger {
    pub fn stdout() -> Self {
        TextLogger {
            out: Box::new(std::io::stdout()),
        }
    }

    pub fn to_writer(out: Box<dyn Write>) -> Self {
        TextLogger { out }
    }
}

impl Logger for TextLogger {
    fn name(&self) -> &str {
        "text"
    }

    fn log_metric(&mut self, v: &MetricValue) -> Result<()> {
        match v.granularity {
            Granularity::Experience | Granularity::Stream => {
                writeln!(self.out, "{} = {:.4}", v.name, v.value)?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn on_training_exp_end(&mut self, summary: &str) -> Result<()> {
        writeln!(self.out, "{summary}")?;
        Ok(())
    }

    fn on_eval_end(&mut self, summary: &str) -> Result<()> {
        writeln!(self.out, "{summary}")?;
        Ok(())
    }

    fn byte_offset(&mut self) -> Result<Option<u64>> {
        Ok(None)
    }

    fn close(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Emission context supplied by the training loop.
#[derive(Clone, Copy, Debug)]
pub struct EmitCtx<'a> {
    /// Global training iteration count at emission time.
    pub x_axis: u64,
    pub stream: &'a str,
    pub task: i64,
    pub exp_index: usize,
    /// Experiences fully trained so far; fixes the accuracy-matrix row.
    pub trained_experiences: usize,
}

/// Computes accuracy and loss at every granularity, delivers each value to
/// every logger exactly once (value-major, registration order, fail-fast),
/// and maintains the accuracy matrix from eval results.
///
/// Training emits minibatch, epoch, and experience values; the experience
/// value is the mean of its epoch values. Eval emits one experience value
/// per evaluated experience plus an example-weighted stream value, so one
/// eval pass emits `n_experiences + 1` values per metric kind.
pub struct EvaluationPlugin {
    loggers: Vec<Box<dyn Logger>>,
    matrix: AccuracyMatrix,
    captured: Vec<MetricValue>,
    timer: ExperienceTimer,
    epoch_acc: RunningMean,
    epoch_loss: RunningMean,
    exp_acc: RunningMean,
    exp_loss: RunningMean,
    eval_exp_acc: RunningMean,
    eval_exp_loss: RunningMean,
    stream_acc: RunningMean,
    stream_loss: RunningMean,
    eval_exp_count: usize,
}

#[derive(Serialize, Deserialize)]
struct EvaluatorSnapshot {
    matrix: AccuracyMatrix,
}

impl EvaluationPlugin {
    pub fn new(loggers: Vec<Box<dyn Logger>>) -> Self {
        EvaluationPlugin {
            loggers,
            matrix: AccuracyMatrix::new(),
            captured: Vec::new(),
            timer: ExperienceTimer::new(),
            epoch_acc: RunningMean::default(),
            epoch_loss: RunningMean::default(),
            exp_acc: RunningMean::default(),
            exp_loss: RunningMean::default(),
            eval_exp_acc: RunningMean::default(),
            eval_exp_loss: RunningMean::default(),
            stream_acc: RunningMean::default(),
            stream_loss: RunningMean::default(),
            eval_exp_count: 0,
        }
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    /// Eval emissions captured since the last `before_eval`.
    pub fn take_captured(&mut self) -> Vec<MetricValue> {
        std::mem::take(&mut self.captured)
    }

    fn emit(
        &mut self,
        kind: MetricKind,
        gran: Granularity,
        phase: Phase,
        ctx: &EmitCtx,
        value: f64,
    ) -> Result<()> {
        let (task, exp) = if gran == Granularity::Stream {
            (0, None)
        } else {
            (ctx.task, Some(ctx.exp_index))
        };
        let v = MetricValue {
            name: canonical_name(kind, gran, phase, ctx.stream, task, exp),
            value,
            x_axis: ctx.x_axis,
            granularity: gran,
            phase,
            stream_name: ctx.stream.to_string(),
            task_label: task,
            experience_index: exp,
        };
        for lg in &mut self.loggers {
            if let Err(e) = lg.log_metric(&v) {
                return Err(Error::Logging {
                    logger: lg.name().to_string(),
                    source: Box::new(e),
                });
            }
        }
        if phase == Phase::Eval {
            self.captured.push(v);
        }
        Ok(())
    }

    fn training_summary(&mut self, summary: &str) -> Result<()> {
        for lg in &mut self.loggers {
            if let Err(e) = lg.on_training_exp_end(summary) {
                return Err(Error::Logging {
                    logger: lg.name().to_string(),
                    source: Box::new(e),
                });
            }
        }
        Ok(())
    }

    fn eval_summary(&mut self, summary: &str) -> Result<()> {
        for lg in &mut self.loggers {
            if let Err(e) = lg.on_eval_end(summary) {
                return Err(Error::Logging {
                    logger: lg.name().to_string(),
                    source: Box::new(e),
                });
            }
        }
        Ok(())
    }

    pub fn before_training_exp(&mut self, exp_index: usize) -> Result<()> {
        self.timer.start(exp_index)?;
        self.epoch_acc.reset();
        self.epoch_loss.reset();
        self.exp_acc.reset();
        self.exp_loss.reset();
        Ok(())
    }

    pub fn after_training_iteration(
        &mut self,
        ctx: &EmitCtx,
        logits: &Matrix,
        targets: &[usize],
        loss: f64,
    ) -> Result<()> {
        let mut mb = RunningMean::default();
        accuracy_update(&mut mb, logits, targets)?;
        self.epoch_acc.add(mb.sum(), mb.weight());
        let n = targets.len() as f64;
        self.epoch_loss.add(loss * n, n);
        self.emit(
            MetricKind::Accuracy,
            Granularity::Minibatch,
            Phase::Train,
            ctx,
            mb.result(),
        )?;
        self.emit(MetricKind::Loss, Granularity::Minibatch, Phase::Train, ctx, loss)
    }

    pub fn after_training_epoch(&mut self, ctx: &EmitCtx) -> Result<()> {
        let acc = self.epoch_acc.result();
        let loss = self.epoch_loss.result();
        // Each epoch contributes one equally-weighted point to the
        // experience-level value.
        self.exp_acc.add(acc, 1.0);
        self.exp_loss.add(loss, 1.0);
        self.epoch_acc.reset();
        self.epoch_loss.reset();
        self.emit(MetricKind::Accuracy, Granularity::Epoch, Phase::Train, ctx, acc)?;
        self.emit(MetricKind::Loss, Granularity::Epoch, Phase::Train, ctx, loss)
    }

    pub fn after_training_exp(&mut self, ctx: &EmitCtx) -> Result<()> {
        let acc = self.exp_acc.result();
        let loss = self.exp_loss.result();
        self.emit(
            MetricKind::Accuracy,
            Granularity::Experience,
            Phase::Train,
            ctx,
            acc,
        )?;
        self.emit(
            MetricKind::Loss,
            Granularity::Experience,
            Phase::Train,
            ctx,
            loss,
        )?;
        let secs = self.timer.stop(ctx.exp_index)?;
        let name = canonical_name(
            MetricKind::Time,
            Granularity::Experience,
            Phase::Train,
            ctx.stream,
            ctx.task,
            Some(ctx.exp_index),
        );
        self.training_summary(&format!(
            "{name} = {secs:.3}s (acc {acc:.4}, loss {loss:.4})"
        ))
    }

    pub fn before_eval(&mut self) {
        self.stream_acc.reset();
        self.stream_loss.reset();
        self.eval_exp_count = 0;
        self.captured.clear();
    }

    pub fn before_eval_exp(&mut self) {
        self.eval_exp_acc.reset();
        self.eval_exp_loss.reset();
    }

    pub fn after_eval_iteration(
        &mut self,
        logits: &Matrix,
        targets: &[usize],
        loss: f64,
    ) -> Result<()> {
        accuracy_update(&mut self.eval_exp_acc, logits, targets)?;
        let n = targets.len() as f64;
        self.eval_exp_loss.add(loss * n, n);
        Ok(())
    }

    pub fn after_eval_exp(&mut self, ctx: &EmitCtx) -> Result<()> {
        let acc = self.eval_exp_acc.result();
        let loss = self.eval_exp_loss.result();
        self.emit(
            MetricKind::Accuracy,
            Granularity::Experience,
            Phase::Eval,
            ctx,
            acc,
        )?;
        self.emit(
            MetricKind::Loss,
            Granularity::Experience,
            Phase::Eval,
            ctx,
            loss,
        )?;
        if ctx.trained_experiences > 0 {
            self.matrix
                .record(ctx.trained_experiences - 1, ctx.exp_index, acc)?;
        }
        // Forward raw counts so the stream value is example-weighted.
        self.stream_acc
            .add(self.eval_exp_acc.sum(), self.eval_exp_acc.weight());
        self.stream_loss
            .add(self.eval_exp_loss.sum(), self.eval_exp_loss.weight());
        self.eval_exp_count += 1;
        Ok(())
    }

    pub fn after_eval(&mut self, ctx: &EmitCtx) -> Result<()> {
        let acc = self.stream_acc.result();
        let loss = self.stream_loss.result();
        self.emit(MetricKind::Accuracy, Granularity::Stream, Phase::Eval, ctx, acc)?;
        self.emit(MetricKind::Loss, Granularity::Stream, Phase::Eval, ctx, loss)?;
        let n = self.eval_exp_count;
        self.eval_summary(&format!(
            "eval over {n} experiences: stream acc {acc:.4}, loss {loss:.4}"
        ))
    }

    pub fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(json!(EvaluatorSnapshot {
            matrix: self.matrix.clone(),
        }))
    }

    pub fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        let snap: EvaluatorSnapshot = serde_json::from_value(snapshot.clone())?;
        self.matrix = snap.matrix;
        Ok(())
    }

    /// Current byte offsets of all file-backed loggers, keyed by logger
    /// name. Recorded in checkpoints for resume truncation.
    pub fn byte_offsets(&mut self) -> Result<BTreeMap<String, u64>> {
        let mut out = BTreeMap::new();
        for lg in &mut self.loggers {
            let name = lg.name().to_string();
            if let Some(off) = lg.byte_offset().map_err(|e| Error::Logging {
                logger: name.clone(),
                source: Box::new(e),
            })? {
                out.insert(name, off);
            }
        }
        Ok(out)
    }

    pub fn close(&mut self) -> Result<()> {
        for lg in &mut self.loggers {
            if let Err(e) = lg.close() {
                return Err(Error::Logging {
                    logger: lg.name().to_string(),
                    source: Box::new(e),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn canonical_name_layouts() {
        assert_eq!(
            canonical_name(
                MetricKind::Accuracy,
                Granularity::Experience,
                Phase::Eval,
                "test",
                0,
                Some(1)
            ),
            "Acc_Exp/eval_phase/test_stream/Task000/Exp001"
        );
        assert_eq!(
            canonical_name(
                MetricKind::Loss,
                Granularity::Minibatch,
                Phase::Train,
                "train",
                12,
                Some(0)
            ),
            "Loss_MB/train_phase/train_stream/Task012/Exp000"
        );
        assert_eq!(
            canonical_name(
                MetricKind::Accuracy,
                Granularity::Stream,
                Phase::Eval,
                "test",
                7,
                Some(3)
            ),
            "Acc_Stream/eval_phase/test_stream/Task000"
        );
        assert_eq!(
            canonical_name(
                MetricKind::Time,
                Granularity::Epoch,
                Phase::Train,
                "train",
                0,
                Some(42)
            ),
            "Time_Epoch/train_phase/train_stream/Task000/Exp042"
        );
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain/name"), "plain/name");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("two\nlines"), "\"two\nlines\"");
    }

    #[test]
    fn value_formatting() {
        assert_eq!(fmt_value(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_value(1.0), "1.0000000000000000e0");
        let tricky = 0.1 + 0.2;
        let parsed: f64 = fmt_value(tricky).parse().unwrap();
        assert_eq!(parsed, tricky);
    }

    fn mv(name: &str, gran: Granularity, exp: Option<usize>, value: f64) -> MetricValue {
        MetricValue {
            name: name.to_string(),
            value,
            x_axis: 17,
            granularity: gran,
            phase: Phase::Eval,
            stream_name: "test".to_string(),
            task_label: 0,
            experience_index: exp,
        }
    }

    #[test]
    fn csv_logger_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut lg = CsvLogger::create(&path).unwrap();
        lg.log_metric(&mv("A/x", Granularity::Experience, Some(2), 0.5))
            .unwrap();
        lg.log_metric(&mv("B/y", Granularity::Stream, None, 1.0))
            .unwrap();
        lg.close().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "name,phase,stream,task,experience,granularity,x_axis,value\n\
             A/x,eval,test,0,2,experience,17,5.0000000000000000e-1\n\
             B/y,eval,test,0,,stream,17,1.0000000000000000e0\n"
        );
    }

    #[test]
    fn csv_resume_truncates_to_offset() {
        let dir = tempfile::tempdir().unwrap();

        // Straight-through reference run.
        let full = dir.path().join("full.csv");
        let mut lg = CsvLogger::create(&full).unwrap();
        for i in 0..3 {
            lg.log_metric(&mv("m", Granularity::Experience, Some(i), 0.25))
                .unwrap();
        }
        lg.close().unwrap();

        // Interrupted run: checkpoint after two rows, a third row lands
        // after the checkpoint, resume truncates and rewrites it.
        let split = dir.path().join("split.csv");
        let mut lg = CsvLogger::create(&split).unwrap();
        for i in 0..2 {
            lg.log_metric(&mv("m", Granularity::Experience, Some(i), 0.25))
                .unwrap();
        }
        let offset = lg.byte_offset().unwrap().unwrap();
        lg.log_metric(&mv("orphan", Granularity::Experience, Some(9), 0.75))
            .unwrap();
        lg.close().unwrap();
        drop(lg);

        let mut lg = CsvLogger::resume(&split, offset).unwrap();
        lg.log_metric(&mv("m", Granularity::Experience, Some(2), 0.25))
            .unwrap();
        lg.close().unwrap();

        assert_eq!(
            std::fs::read(&full).unwrap(),
            std::fs::read(&split).unwrap()
        );
    }

    #[test]
    fn resume_rejects_shorter_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        CsvLogger::create(&path).unwrap().close().unwrap();
        let err = match CsvLogger::resume(&path, 10_000) {
            Ok(_) => panic!("resume past end of file must fail"),
            Err(e) => e,
        };
        assert_eq!(err.kind(), "state-error");
    }

    #[test]
    fn jsonl_logger_layout_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut lg = JsonlLogger::create(&path).unwrap();
        lg.log_metric(&mv("A/x", Granularity::Experience, Some(2), 0.5))
            .unwrap();
        lg.log_metric(&mv("B/y", Granularity::Stream, None, 0.1 + 0.2))
            .unwrap();
        lg.close().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);

        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["name"], "A/x");
        assert_eq!(first["phase"], "eval");
        assert_eq!(first["stream"], "test");
        assert_eq!(first["task"], 0);
        assert_eq!(first["experience"], 2);
        assert_eq!(first["granularity"], "experience");
        assert_eq!(first["x_axis"], 17);
        assert_eq!(first["value"], 0.5);

        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert!(second["experience"].is_null());
        assert_eq!(second["value"].as_f64().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn text_logger_coarse_only() {
        struct SharedBuf(Rc<RefCell<Vec<u8>>>);
        impl Write for SharedBuf {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.borrow_mut().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Rc::new(RefCell::new(Vec::new()));
        let mut lg = TextLogger::to_writer(Box::new(SharedBuf(buf.clone())));
        lg.log_metric(&mv("fine", Granularity::Minibatch, Some(0), 0.1))
            .unwrap();
        lg.log_metric(&mv("fine", Granularity::Epoch, Some(0), 0.2))
            .unwrap();
        lg.log_metric(&mv("coarse", Granularity::Experience, Some(0), 0.3))
            .unwrap();
        lg.on_eval_end("done").unwrap();
        lg.close().unwrap();
        let text = String::from_utf8(buf.borrow().clone()).unwrap();
        assert_eq!(text, "coarse = 0.3000\ndone\n");
        assert_eq!(lg.byte_offset().unwrap(), None);
    }

    /// Records every delivery so tests can assert exactly-once dispatch.
    struct CollectingLogger {
        label: String,
        seen: Rc<RefCell<Vec<String>>>,
    }

    impl Logger for CollectingLogger {
        fn name(&self) -> &str {
            &self.label
        }
        fn log_metric(&mut self, value: &MetricValue) -> Result<()> {
            self.seen
                .borrow_mut()
                .push(format!("{}:{}", self.label, value.name));
            Ok(())
        }
        fn byte_offset(&mut self) -> Result<Option<u64>> {
            Ok(None)
        }
        fn close(&mut self) -> Result<()> {
            Ok(())
        }
    }

    /// Fails on the nth `log_metric` call.
    struct FailingLogger {
        calls: usize,
        fail_at: usize,
    }

    impl Logger for FailingLogger {
        fn name(&self) -> &str {
            "flaky"
        }
        fn log_metric(&mut self, _: &MetricValue) -> Result<()> {
            self.calls += 1;
            if self.calls == self.fail_at {
                Err(Error::Io(std::io::Error::other("disk full")))
            } else {
                Ok(())
            }
        }
        fn byte_offset(&mut self) -> Result<Option<u64>> {
            Ok(None)
        }
        fn close(&mut self) -> Result<()> {
            Ok(())
        }
    }

    fn one_hot_logits(targets: &[usize], hits: usize, cols: usize) -> Matrix {
        // First `hits` rows predict their target, the rest predict
        // (target+1) % cols.
        let mut m = Matrix::zeros(targets.len(), cols);
        for (i, &t) in targets.iter().enumerate() {
            let j = if i < hits { t } else { (t + 1) % cols };
            m.set(i, j, 5.0);
        }
        m
    }

    #[test]
    fn evaluator_eval_pass_weighted_stream_and_matrix() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let mut ev = EvaluationPlugin::new(vec![Box::new(CollectingLogger {
            label: "a".into(),
            seen: seen.clone(),
        })]);

        ev.before_eval();
        let ctx0 = EmitCtx {
            x_axis: 100,
            stream: "test",
            task: 0,
            exp_index: 0,
            trained_experiences: 2,
        };
        // Experience 0: 10 examples, all correct.
        ev.before_eval_exp();
        let t0: Vec<usize> = vec![0; 10];
        ev.after_eval_iteration(&one_hot_logits(&t0, 10, 3), &t0, 0.1)
            .unwrap();
        ev.after_eval_exp(&ctx0).unwrap();
        // Experience 1: 30 examples, 15 correct, across two batches.
        ev.before_eval_exp();
        let t1: Vec<usize> = vec![1; 20];
        ev.after_eval_iteration(&one_hot_logits(&t1, 10, 3), &t1, 0.4)
            .unwrap();
        let t2: Vec<usize> = vec![2; 10];
        ev.after_eval_iteration(&one_hot_logits(&t2, 5, 3), &t2, 0.7)
            .unwrap();
        let ctx1 = EmitCtx {
            exp_index: 1,
            ..ctx0
        };
        ev.after_eval_exp(&ctx1).unwrap();
        ev.after_eval(&ctx1).unwrap();

        // Per eval pass: one experience value per experience plus one
        // stream value, for each of the two metric kinds.
        let captured = ev.take_captured();
        assert_eq!(captured.len(), 2 * 2 + 2);

        let by_name: BTreeMap<&str, f64> = captured
            .iter()
            .map(|v| (v.name.as_str(), v.value))
            .collect();
        assert_eq!(by_name["Acc_Exp/eval_phase/test_stream/Task000/Exp000"], 1.0);
        assert_eq!(by_name["Acc_Exp/eval_phase/test_stream/Task000/Exp001"], 0.5);
        // Example-weighted: (10*1.0 + 30*0.5) / 40.
        assert!((by_name["Acc_Stream/eval_phase/test_stream/Task000"] - 0.625).abs() < 1e-15);
        // Loss likewise: (10*0.1 + 20*0.4 + 10*0.7) / 40 = 0.4.
        assert!((by_name["Loss_Stream/eval_phase/test_stream/Task000"] - 0.4).abs() < 1e-12);

        // Matrix row is trained_experiences - 1.
        assert_eq!(ev.matrix().get(1, 0), Some(1.0));
        assert_eq!(ev.matrix().get(1, 1), Some(0.5));

        // Every value delivered exactly once to the registered logger.
        assert_eq!(seen.borrow().len(), 6);
    }

    #[test]
    fn evaluator_training_epoch_mean() {
        let mut ev = EvaluationPlugin::new(vec![]);
        ev.before_training_exp(0).unwrap();
        let ctx = EmitCtx {
            x_axis: 0,
            stream: "train",
            task: 0,
            exp_index: 0,
            trained_experiences: 0,
        };
        // Epoch 0: acc 1.0 over 4; epoch 1: acc 0.5 over 4.
        let t: Vec<usize> = vec![0; 4];
        ev.after_training_iteration(&ctx, &one_hot_logits(&t, 4, 2), &t, 1.0)
            .unwrap();
        ev.after_training_epoch(&ctx).unwrap();
        ev.after_training_iteration(&ctx, &one_hot_logits(&t, 2, 2), &t, 0.5)
            .unwrap();
        ev.after_training_epoch(&ctx).unwrap();
        assert!((ev.exp_acc.result() - 0.75).abs() < 1e-15);
        assert!((ev.exp_loss.result() - 0.75).abs() < 1e-15);
        ev.after_training_exp(&ctx).unwrap();
    }

    #[test]
    fn dispatch_is_value_major_and_fail_fast() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let mut ev = EvaluationPlugin::new(vec![
            Box::new(FailingLogger {
                calls: 0,
                fail_at: 2,
            }),
            Box::new(CollectingLogger {
                label: "tail".into(),
                seen: seen.clone(),
            }),
        ]);
        ev.before_eval();
        ev.before_eval_exp();
        let t: Vec<usize> = vec![0; 2];
        ev.after_eval_iteration(&one_hot_logits(&t, 2, 2), &t, 0.3)
            .unwrap();
        let ctx = EmitCtx {
            x_axis: 5,
            stream: "test",
            task: 0,
            exp_index: 0,
            trained_experiences: 1,
        };
        // First value (accuracy) reaches both loggers; the second (loss)
        // fails in the first logger, so the second logger never sees it.
        let err = ev.after_eval_exp(&ctx).unwrap_err();
        assert_eq!(err.kind(), "logging-error");
        assert!(err.to_string().contains("flaky"));
        let seen = seen.borrow();
        assert_eq!(seen.len(), 1);
        assert!(seen[0].contains("Acc_Exp"));
    }

    #[test]
    fn evaluator_snapshot_round_trip() {
        let mut ev = EvaluationPlugin::new(vec![]);
        ev.before_eval();
        ev.before_eval_exp();
        let t: Vec<usize> = vec![0; 3];
        ev.after_eval_iteration(&one_hot_logits(&t, 3, 2), &t, 0.2)
            .unwrap();
        let ctx = EmitCtx {
            x_axis: 9,
            stream: "test",
            task: 0,
            exp_index: 0,
            trained_experiences: 1,
        };
        ev.after_eval_exp(&ctx).unwrap();

        let snap = ev.snapshot().unwrap();
        let mut ev2 = EvaluationPlugin::new(vec![]);
        ev2.restore(&snap).unwrap();
        assert_eq!(ev2.matrix().get(0, 0), Some(1.0));
    }
}
