use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};

use ictrace_core::{TaskKind, TaskSpec};

use crate::catalogue::PromptConfig;
use crate::eval::{FailureClass, MetricsRow};

pub const REPORT_HEADER: &str = "variant,task,prompt_config,k,mean_score,n,trace_error,grasp_failure,placement_failure,poke_failure,overflow";

/// Seeds pooled. Failure columns are fractions of the failed rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub task: TaskSpec,
    pub prompt_config: PromptConfig,
    pub k: usize,
    pub mean_score: f64,
    pub n: usize,
    pub failure_fractions: [f64; 5],
}

pub fn report_rows(metrics: &[MetricsRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, TaskSpec, PromptConfig, usize), (f64, usize, [usize; 6])> = BTreeMap::new();
    for m in metrics {
        let g = groups.entry((m.variant.clone(), m.task, m.prompt_config, m.k)).or_default();
        g.0 += m.mean_score * m.n as f64;
        g.1 += m.n;
        for (a, b) in g.2.iter_mut().zip(m.failures) {
            *a += b;
        }
    }
    groups
        .into_iter()
        .map(|((variant, task, prompt_config, k), (sum, n, f))| {
            let failed: usize = f[1..].iter().sum();
            let frac = |c: usize| if failed == 0 { 0.0 } else { c as f64 / failed as f64 };
            ReportRow {
                variant,
                task,
                prompt_config,
                k,
                mean_score: if n == 0 { 0.0 } else { sum / n as f64 },
                n,
                failure_fractions: std::array::from_fn(|i| frac(f[i + 1])),
            }
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let f: Vec<String> = r.failure_fractions.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{},{},{},{},{:.6},{},{}", r.variant, r.task, r.prompt_config, r.k, r.mean_score, r.n, f.join(","));
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        bail!("not a report table: header mismatch");
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                bail!("expected 11 fields, got {}", f.len());
            }
            let mut failure_fractions = [0.0; 5];
            for (j, slot) in failure_fractions.iter_mut().enumerate() {
                *slot = f[6 + j].parse()?;
            }
            Ok(ReportRow {
                variant: f[0].to_string(),
                task: TaskSpec::parse(f[1])?,
                prompt_config: PromptConfig::parse(f[2])?,
                k: f[3].parse()?,
                mean_score: f[4].parse()?,
                n: f[5].parse()?,
                failure_fractions,
            })
        })
        .collect()
}

fn pooled<'a>(rows: impl Iterator<Item = &'a ReportRow>) -> Option<f64> {
    let (s, n) = rows.fold((0.0, 0usize), |(s, n), r| (s + r.mean_score * r.n as f64, n + r.n));
    (n > 0).then(|| s / n as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Plain-text tables: success by variant and task kind, by prompt setup, by
/// reasoning interval, and the failure breakdown.
pub fn summary(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let variants: Vec<&str> = {
        let mut v: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        v.dedup();
        v.sort();
        v.dedup();
        v
    };
    let _ = writeln!(out, "Success rate (%) by variant and task kind\n");
    let _ = writeln!(out, "{:<14}{:>10}{:>12}{:>10}", "variant", "poke", "pick_place", "all");
    for v in &variants {
        let of = |kind: Option<TaskKind>| pooled(rows.iter().filter(|r| r.variant == *v && kind.is_none_or(|k| r.task.kind() == k)));
        let _ = writeln!(out, "{:<14}{:>10}{:>12}{:>10}", v, cell(of(Some(TaskKind::Poke))), cell(of(Some(TaskKind::PickPlace))), cell(of(None)));
    }

    let _ = writeln!(out, "\nSuccess rate (%) by prompt demonstration\n");
    let _ = write!(out, "{:<14}", "variant");
    for p in PromptConfig::ALL {
        let _ = write!(out, "{:>24}", p.name());
    }
    out.push('\n');
    for v in &variants {
        let _ = write!(out, "{v:<14}");
        for p in PromptConfig::ALL {
            let _ = write!(out, "{:>24}", cell(pooled(rows.iter().filter(|r| r.variant == *v && r.prompt_config == p))));
        }
        out.push('\n');
    }

    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_by_key(|&k| if k == 0 { usize::MAX } else { k });
    ks.dedup();
    if ks.len() > 1 {
        let _ = writeln!(out, "\nSuccess rate (%) by reasoning interval (0 = never)\n");
        let _ = writeln!(out, "{:<14}{:>6}{:>10}", "variant", "k", "success");
        for v in &variants {
            for &k in &ks {
                if let Some(s) = pooled(rows.iter().filter(|r| r.variant == *v && r.k == k)) {
                    let _ = writeln!(out, "{v:<14}{k:>6}{:>10}", cell(Some(s)));
                }
            }
        }
    }

    let _ = writeln!(out, "\nFailure breakdown (% of failed rollouts)\n");
    let _ = write!(out, "{:<14}", "variant");
    for f in &FailureClass::ALL[1..] {
        let _ = write!(out, "{:>19}", f.name());
    }
    out.push('\n');
    for v in &variants {
        let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.variant == *v).collect();
        let failed: Vec<f64> = mine.iter().map(|r| (1.0 - r.mean_score) * r.n as f64).collect();
        let total: f64 = failed.iter().sum();
        let _ = write!(out, "{v:<14}");
        for j in 0..5 {
            // weight each row's fractions by its share of failed rollouts
            let w: f64 = mine.iter().zip(&failed).map(|(r, f)| r.failure_fractions[j] * f).sum();
            let _ = write!(out, "{:>19}", if total > 0.0 { format!("{:.1}", 100.0 * w / total) } else { "-".to_string() });
        }
        out.push('\n');
    }
    out
}
