//! Benchmark harness around `ictrace-core`: dataset generation, training,
//! held-out evaluation, the reasoning-interval sweep and reports.

pub mod catalogue;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ictrace_core::{TaskSpec, Variant};

pub use catalogue::{PromptConfig, PromptSelection, Split};
pub use config::HarnessConfig;
pub use data::cmd_gen_data;
pub use eval::{classify_failure, evaluate, Agent, FailureClass, MetricsRow, RolloutRecord};

/// A variant name as given on the command line: a model variant or the
/// scripted expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Model(Variant),
    Expert,
}

impl Subject {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "expert" {
            return Ok(Subject::Expert);
        }
        Ok(Subject::Model(Variant::parse(s)?))
    }
}

/// Trains every `(variant, seed)` pair; returns the checkpoint paths.
pub fn cmd_train(cfg: &HarnessConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<PathBuf>> {
    let data = data::load_training_set(cfg)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let mut out = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            train::train_variant(cfg, &data, variant, seed, &cfg.out_dir)?;
            out.push(train::checkpoint_path(&cfg.out_dir, variant, seed));
        }
    }
    Ok(out)
}

fn held_out(cfg: &HarnessConfig) -> Result<Vec<TaskSpec>> {
    Ok(Split::load(&data::DataPaths::new(&cfg.data_dir).split)?.test)
}

fn run_subject(cfg: &HarnessConfig, subject: Subject, seed: u64, tasks: &[TaskSpec], k: usize) -> Result<Vec<RolloutRecord>> {
    match subject {
        Subject::Expert => evaluate(cfg, Agent::Expert, seed, tasks, k, cfg.rollouts),
        Subject::Model(variant) => {
            let model = train::load_model(&cfg.out_dir, variant, seed)?;
            evaluate(cfg, Agent::Model { model: &model, variant }, seed, tasks, k, cfg.rollouts)
        }
    }
}

/// Evaluates each subject and seed on the held-out tasks at the configured
/// interval; writes `eval/eval.csv` and the per-rollout table.
pub fn cmd_eval(cfg: &HarnessConfig, subjects: &[Subject], seeds: &[u64]) -> Result<Vec<RolloutRecord>> {
    let tasks = held_out(cfg)?;
    let mut records = Vec::new();
    for &subject in subjects {
        for &seed in seeds {
            records.extend(run_subject(cfg, subject, seed, &tasks, cfg.interval)?);
        }
    }
    let dir = cfg.out_dir.join("eval");
    eval::write_tables(&dir, "eval", &records)?;
    cfg.write_resolved(&dir)?;
    Ok(records)
}

/// Evaluates one checkpoint per seed at every interval in `intervals`.
pub fn cmd_sweep_interval(cfg: &HarnessConfig, subject: Subject, seeds: &[u64], intervals: &[usize]) -> Result<Vec<RolloutRecord>> {
    let tasks = held_out(cfg)?;
    let mut records = Vec::new();
    for &seed in seeds {
        for &k in intervals {
            records.extend(run_subject(cfg, subject, seed, &tasks, k)?);
        }
    }
    let dir = cfg.out_dir.join("sweep");
    eval::write_tables(&dir, "sweep", &records)?;
    cfg.write_resolved(&dir)?;
    Ok(records)
}

/// Merges metrics tables into `report.csv` and `summary.txt` under `out`.
pub fn cmd_report(metrics_files: &[PathBuf], out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    for path in metrics_files {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        rows.extend(eval::parse_metrics_csv(&text).with_context(|| format!("in {}", path.display()))?);
    }
    let report = report::report_rows(&rows);
    let summary = report::summary(&report);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.csv"), report::report_csv(&report))?;
    std::fs::write(out.join("summary.txt"), &summary)?;
    Ok(summary)
}
