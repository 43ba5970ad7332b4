use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ictrace_core::engine::{train_with, LossRecord};
use ictrace_core::numerics::{read_checkpoint, write_checkpoint};
use ictrace_core::seqdata::Trajectory;
use ictrace_core::{PolicyModel, Variant};

use crate::config::HarnessConfig;

pub fn checkpoint_path(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("{}_s{seed}.ckpt", variant.name()))
}

pub fn loss_path(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("loss").join(format!("{}_s{seed}.csv", variant.name()))
}

pub const LOSS_HEADER: &str = "step,total,action,reasoning,grad_norm";

/// One row per `every` steps holding the interval means; `step` is the last
/// step of the interval.
pub fn loss_csv(history: &[LossRecord], every: usize) -> String {
    let mut out = format!("{LOSS_HEADER}\n");
    for chunk in history.chunks(every.max(1)) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&LossRecord) -> f32| chunk.iter().map(|r| f(r) as f64).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            chunk.last().map_or(0, |r| r.step),
            mean(|r| r.total),
            mean(|r| r.action),
            mean(|r| r.reasoning),
            mean(|r| r.grad_norm)
        );
    }
    out
}

/// Trains one variant and writes its checkpoint and loss log under `out`.
pub fn train_variant(cfg: &HarnessConfig, data: &[Trajectory], variant: Variant, seed: u64, out: &Path) -> Result<PolicyModel> {
    let tc = cfg.train_config(variant, seed);
    let state = train_with(cfg.model_config(), &tc, data, |_| {}).with_context(|| format!("training {} (seed {seed})", variant.name()))?;
    let hyper = vec![
        ("variant".to_string(), variant.name().to_string()),
        ("seed".to_string(), seed.to_string()),
        ("steps".to_string(), tc.steps.to_string()),
    ];
    let ckpt = checkpoint_path(out, variant, seed);
    std::fs::create_dir_all(ckpt.parent().unwrap())?;
    write_checkpoint(&ckpt, &state.model.to_checkpoint(&hyper))?;
    let log = loss_path(out, variant, seed);
    std::fs::create_dir_all(log.parent().unwrap())?;
    std::fs::write(&log, loss_csv(&state.history, cfg.log_every))?;
    Ok(state.model)
}

pub fn load_model(out: &Path, variant: Variant, seed: u64) -> Result<PolicyModel> {
    let path = checkpoint_path(out, variant, seed);
    if !path.exists() {
        anyhow::bail!("no checkpoint for variant {} (seed {seed}) at {}", variant.name(), path.display());
    }
    let ckpt = read_checkpoint(&path)?;
    Ok(PolicyModel::from_checkpoint(&ckpt)?)
}
