//! `rill` — run, resume, and inspect continual-learning experiments.
//!
//! Exit codes: 0 success, 2 for configuration problems (bad flags, bad
//! config file), 1 for everything that goes wrong at runtime.

mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rill_core::error::{Error, Result};
use rill_core::experiment::{Checkpoint, ExperimentConfig, RunOptions, CHECKPOINT_VERSION};
use rill_core::metrics::AccuracyMatrix;

#[derive(Parser)]
#[command(name = "rill", version, about = "Continual-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the config's checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Write metric files here instead of the config's output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Train at most this many experiences, then stop.
        #[arg(long)]
        max_experiences: Option<usize>,
    },
    /// Print a summary of a checkpoint file.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Download the four MNIST IDX files into a directory.
    FetchMnist {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.kind() == "config-error" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            resume,
            output,
            max_experiences,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let outcome = rill_core::experiment::run(
                &cfg,
                &RunOptions {
                    resume,
                    max_experiences,
                    output_override: output,
                },
            )?;
            println!("trained through {} experiences", outcome.experiences_trained);
            if let Some(acc) = outcome.final_stream_accuracy {
                println!("final test-stream accuracy {acc:.4}");
            }
            println!("outputs in {}", outcome.output_dir.display());
            Ok(())
        }
        Command::Inspect { ckpt } => inspect(&ckpt),
        Command::FetchMnist { dir } => {
            fetch::fetch(fetch::DEFAULT_BASE_URL, &dir, &fetch::MNIST_FILES)
        }
    }
}

fn inspect(path: &std::path::Path) -> Result<()> {
    let ck = Checkpoint::read(path)?;
    println!("version: {CHECKPOINT_VERSION}");
    println!("config digest: {}", ck.meta.config_digest);
    println!("next experience: {}", ck.progress.next_experience);
    println!(
        "clock: {} iterations, {} experiences seen",
        ck.progress.clock.total_iterations, ck.progress.clock.experiences_seen
    );
    println!("optimizer: {} (lr {})", ck.optimizer.kind, ck.optimizer.lr);

    let plugin_names: Vec<String> = ck
        .plugins
        .as_object()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    if plugin_names.is_empty() {
        println!("plugins: none");
    } else {
        println!("plugins: {}", plugin_names.join(", "));
    }

    if ck.loggers.is_empty() {
        println!("logger offsets: none");
    } else {
        let offsets: Vec<String> = ck
            .loggers
            .iter()
            .map(|(name, off)| format!("{name}@{off}"))
            .collect();
        println!("logger offsets: {}", offsets.join(" "));
    }

    let matrix: AccuracyMatrix = match ck.evaluator.get("matrix") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => {
            return Err(Error::Format(
                "evaluator section has no accuracy matrix".into(),
            ))
        }
    };
    if matrix.is_empty() {
        println!("accuracy matrix: empty");
        return Ok(());
    }
    let max_eval = matrix.iter().map(|((_, i), _)| i).max().unwrap_or(0);
    println!("accuracy matrix (rows: trained through; cols: eval experience):");
    for k in 0..=matrix.last_trained().unwrap_or(0) {
        let cells: Vec<String> = (0..=max_eval)
            .map(|i| match matrix.get(k, i) {
                Some(v) => format!("{v:.4}"),
                None => "   -  ".to_string(),
            })
            .collect();
        println!("  after exp {k:03}: {}", cells.join(" "));
    }
    Ok(())
}
