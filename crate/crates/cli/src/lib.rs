//! Experiment driver for the merging laboratory: data generation, training,
//! static and per-sample merging, evaluation and diagnostics, each writing
//! into a reproducible run directory.
//!
//! ```text
//! <data_dir>/suite/<seed>/task<i>/{train,test}/
//! <output_dir>/<run-id>/
//!     checkpoints/   pretrained, expert_<i>, merged_<method>
//!     reports/       CSV and JSON reports
//!     config.json    resolved configuration
//!     summary.json   written by `reproduce`
//!     meta.json      timestamps, thread count, last command
//! ```
//!
//! Everything except `meta.json` is a function of the configuration and does
//! not depend on the worker-pool size.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Merge,
    Eval,
    SeEval,
    Diagnose,
    ExportReps,
    Reproduce,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Merge => "merge",
            Command::Eval => "eval",
            Command::SeEval => "se-eval",
            Command::Diagnose => "diagnose",
            Command::ExportReps => "export-reps",
            Command::Reproduce => "reproduce",
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    run_id: &'a str,
    command: &'a str,
    version: &'a str,
    threads: usize,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Worker pool of `threads` workers; `None` or 0 uses every available core.
pub fn thread_pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads:?} worker threads: {e}")))
}

/// Runs `command` on a pool of `threads` workers and returns a one-line
/// human-readable result.
pub fn run(command: Command, cfg: &RunConfig, threads: Option<usize>) -> CliResult<String> {
    let pool = thread_pool(threads)?;
    let started = now_ms();
    let paths = commands::RunPaths::new(cfg);
    if command != Command::GenData {
        report::write_file(&paths.root.join("config.json"), &report::to_json(cfg))?;
    }
    let message = pool.install(|| dispatch(command, cfg))?;
    if command != Command::GenData {
        let meta = Meta {
            run_id: &cfg.run_id,
            command: command.name(),
            version: env!("CARGO_PKG_VERSION"),
            threads: pool.current_num_threads(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        };
        report::write_file(&paths.meta(), &report::to_json(&meta))?;
    }
    Ok(message)
}

fn dispatch(command: Command, cfg: &RunConfig) -> CliResult<String> {
    let paths = commands::RunPaths::new(cfg);
    Ok(match command {
        Command::GenData => format!("wrote {}", commands::gen_data(cfg)?.display()),
        Command::Train => {
            let s = commands::train(cfg)?;
            format!(
                "pretrained test accuracy {:.6}; expert test accuracy {}",
                s.pretrained_test_accuracy.0,
                join(s.expert_test_accuracy.iter().map(|a| a.0))
            )
        }
        Command::Merge => format!("wrote {}", commands::merge(cfg)?.display()),
        Command::Eval => {
            let e = commands::eval(cfg)?;
            format!(
                "mean accuracy: pretrained {:.6}, task_arithmetic {:.6}, ties {:.6}, average {:.6}; wrote {}",
                report::mean(&e.pretrained),
                report::mean(&e.task_arithmetic),
                report::mean(&e.ties),
                report::mean(&e.weight_average),
                paths.report("eval.csv").display()
            )
        }
        Command::SeEval => {
            let e = commands::se_eval(cfg)?;
            format!(
                "SE-Merging mean accuracy {:.6} (per task {}); wrote {}",
                e.mean_accuracy,
                join(e.per_task_accuracy.iter().copied()),
                paths.report("se_samples.csv").display()
            )
        }
        Command::Diagnose => {
            commands::diagnose(cfg)?;
            format!("wrote {}", paths.report("diagnostics.json").display())
        }
        Command::ExportReps => {
            let (path, rows) = commands::export_reps(cfg)?;
            format!("wrote {rows} rows to {}", path.display())
        }
        Command::Reproduce => {
            let s = commands::reproduce(cfg)?;
            format!(
                "SE-Merging {:.6} vs task arithmetic {:.6} (gap {:+.6}); wrote {}",
                s.mean_accuracy.se_merging.0,
                s.mean_accuracy.task_arithmetic.0,
                s.se_minus_task_arithmetic.0,
                paths.summary().display()
            )
        }
    })
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")
}
