//! Closed-loop evaluation, failure classification and metrics tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use ictrace_core::engine::{rollout, ExpertReplay, ModelPolicy, Policy, RolloutOptions, RolloutOutcome, Scene};
use ictrace_core::seqdata::{Trajectory, MAX_EPISODE_STEPS};
use ictrace_core::simworld::{expert_episode_len, project_to_pixel, reset};
use ictrace_core::{PolicyModel, TaskKind, TaskSpec, Variant, WorldConfig};

use crate::catalogue::{derive_seed, level_distractors, PromptConfig, PromptSelection};
use crate::config::HarnessConfig;
use crate::data::record_demo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureClass {
    None,
    TraceError,
    GraspFailure,
    PlacementFailure,
    PokeFailure,
    Overflow,
}

impl FailureClass {
    pub const ALL: [FailureClass; 6] = [
        FailureClass::None,
        FailureClass::TraceError,
        FailureClass::GraspFailure,
        FailureClass::PlacementFailure,
        FailureClass::PokeFailure,
        FailureClass::Overflow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FailureClass::None => "none",
            FailureClass::TraceError => "trace_error",
            FailureClass::GraspFailure => "grasp_failure",
            FailureClass::PlacementFailure => "placement_failure",
            FailureClass::PokeFailure => "poke_failure",
            FailureClass::Overflow => "overflow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| anyhow!("unknown failure class `{s}`"))
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Buckets a rollout. A trace error means the end of the first decoded trace
/// lies nearer, in third-view pixels, to some other object or receptacle than
/// to the one the task ends at (the target object for a poke, the target
/// receptacle for a pick-and-place).
pub fn classify_failure(outcome: &RolloutOutcome, task: &TaskSpec, world: &WorldConfig) -> FailureClass {
    if outcome.score >= 1.0 {
        return FailureClass::None;
    }
    if outcome.overflow {
        return FailureClass::Overflow;
    }
    if let (Some((_, trace)), Some(state)) = (outcome.traces.first(), &outcome.decision_state) {
        let cam = world.third_camera();
        let g = cam.resolution as f32;
        let end = [trace[8] * g, trace[9] * g];
        let px = |xy: [f32; 2]| {
            let [u, v] = project_to_pixel(xy, &cam);
            ((u - end[0]).powi(2) + (v - end[1]).powi(2)).sqrt()
        };
        let correct = match task.receptacle_class() {
            None => state.object_of_class(task.object_class()).map(|i| state.objects[i].pos),
            Some(rc) => state.receptacle_of_class(rc).map(|i| state.receptacles[i].pos),
        };
        if let Some(c) = correct {
            let d_correct = px(c);
            let wrong = state.objects.iter().chain(&state.receptacles).map(|e| e.pos).filter(|p| *p != c).any(|p| px(p) < d_correct);
            if wrong {
                return FailureClass::TraceError;
            }
        }
    }
    match task.kind() {
        TaskKind::Poke => FailureClass::PokeFailure,
        TaskKind::PickPlace if outcome.score >= 0.5 => FailureClass::PlacementFailure,
        TaskKind::PickPlace => FailureClass::GraspFailure,
    }
}

/// What drives the rollouts.
#[derive(Clone, Copy)]
pub enum Agent<'m> {
    Model { model: &'m PolicyModel, variant: Variant },
    /// The noise-free expert behind the policy interface.
    Expert,
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Model { variant, .. } => variant.name(),
            Agent::Expert => "expert",
        }
    }

    /// Variants trained without target traces never decode one.
    pub fn effective_interval(&self, k: usize) -> usize {
        match self {
            Agent::Model { variant, .. } if !variant.target_reasoning => 0,
            _ => k,
        }
    }
}

/// One executed rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub variant: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub prompt_config: PromptConfig,
    pub k: usize,
    pub rollout: usize,
    pub level: usize,
    pub score: f32,
    pub steps: usize,
    pub trace_decodes: usize,
    pub failure: FailureClass,
}

pub const ROLLOUT_HEADER: &str = "variant,seed,task,prompt_config,k,rollout,level,score,steps,trace_decodes,failure";

impl RolloutRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant, self.seed, self.task, self.prompt_config, self.k, self.rollout, self.level, self.score, self.steps, self.trace_decodes, self.failure
        )
    }

    fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            bail!("expected 11 fields, got {}", f.len());
        }
        let n = |i: usize| f[i].parse::<usize>().map_err(|_| anyhow!("field {i}: `{}` is not a count", f[i]));
        Ok(Self {
            variant: f[0].to_string(),
            seed: f[1].parse()?,
            task: TaskSpec::parse(f[2])?,
            prompt_config: PromptConfig::parse(f[3])?,
            k: n(4)?,
            rollout: n(5)?,
            level: n(6)?,
            score: f[7].parse()?,
            steps: n(8)?,
            trace_decodes: n(9)?,
            failure: FailureClass::parse(f[10])?,
        })
    }
}

pub fn rollouts_csv(records: &[RolloutRecord]) -> String {
    let mut out = format!("{ROLLOUT_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_rollouts_csv(text: &str) -> Result<Vec<RolloutRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(ROLLOUT_HEADER) {
        bail!("not a rollout table: header mismatch");
    }
    lines.enumerate().map(|(i, l)| RolloutRecord::parse_row(l).with_context(|| format!("row {}", i + 1))).collect()
}

/// The prompt demonstration for `(task, prompt config)`, identical for every
/// agent and seed.
pub fn prompt_demo(cfg: &HarnessConfig, task: &TaskSpec, pc: PromptConfig) -> Result<Trajectory> {
    prompt_candidate(cfg, task, pc, 0)
}

/// Candidate `i` of the prompt pool for `(task, prompt config)`; candidate 0
/// is the fixed prompt.
pub fn prompt_candidate(cfg: &HarnessConfig, task: &TaskSpec, pc: PromptConfig, i: u64) -> Result<Trajectory> {
    let task_id = task_index(cfg, task);
    let pc_id = PromptConfig::ALL.iter().position(|p| *p == pc).unwrap() as u64;
    record_demo(task, pc.distractors(), cfg.noise_sigma, &cfg.world, |a| derive_seed(cfg.eval_seed, 2, task_id, pc_id * 1000 + i * 20 + a))
}

/// Which pool candidate rollout `r` is prompted with.
pub fn prompt_choice(cfg: &HarnessConfig, task: &TaskSpec, pc: PromptConfig, r: usize) -> u64 {
    match cfg.prompt_selection {
        PromptSelection::Fixed => 0,
        PromptSelection::Random => {
            let pc_id = PromptConfig::ALL.iter().position(|p| *p == pc).unwrap() as u64;
            derive_seed(cfg.eval_seed, 4, task_index(cfg, task), pc_id * 100_000 + r as u64) % RANDOM_PROMPT_POOL
        }
    }
}

/// Candidates a random prompt is drawn from.
pub const RANDOM_PROMPT_POOL: u64 = 3;

fn task_index(cfg: &HarnessConfig, task: &TaskSpec) -> u64 {
    cfg.catalogue_tasks().iter().position(|t| t == task).map_or(u64::MAX, |i| i as u64)
}

/// Evaluation scene `r` of a task: difficulty cycles through the configured
/// levels and the rollout budget scales with the expert's episode length.
pub fn eval_scene(cfg: &HarnessConfig, task: &TaskSpec, r: usize) -> Result<(Scene, RolloutOptions, usize)> {
    let task_id = task_index(cfg, task);
    let level = r % (cfg.max_level + 1);
    let (objs, recs) = level_distractors(task, level);
    let scene = Scene {
        task: *task,
        n_distractor_objects: objs,
        n_distractor_receptacles: recs,
    };
    for attempt in 0..20u64 {
        let seed = derive_seed(cfg.eval_seed, 3, task_id, r as u64 * 20 + attempt);
        let Ok(init) = reset(task, objs, recs, seed, &cfg.world) else { continue };
        let Some(len) = expert_episode_len(&init, task, &cfg.world, MAX_EPISODE_STEPS)? else { continue };
        let options = RolloutOptions {
            interval: cfg.interval,
            max_steps: cfg.budget_factor * len,
            seed,
            ensemble_decay: cfg.ensemble_decay,
        };
        return Ok((scene, options, level));
    }
    bail!("task {task}: could not build evaluation scene {r}")
}

/// Runs `rollouts` rollouts per (task, prompt config) at interval `k`.
pub fn evaluate(cfg: &HarnessConfig, agent: Agent, seed: u64, tasks: &[TaskSpec], k: usize, rollouts: usize) -> Result<Vec<RolloutRecord>> {
    let k = agent.effective_interval(k);
    let mut out = Vec::new();
    for task in tasks {
        for &pc in &cfg.prompt_configs {
            let pool = match cfg.prompt_selection {
                PromptSelection::Fixed => vec![prompt_demo(cfg, task, pc)?],
                PromptSelection::Random => (0..RANDOM_PROMPT_POOL).map(|i| prompt_candidate(cfg, task, pc, i)).collect::<Result<_>>()?,
            };
            for r in 0..rollouts {
                let prompt = &pool[prompt_choice(cfg, task, pc, r) as usize];
                let (scene, options, level) = eval_scene(cfg, task, r)?;
                let options = RolloutOptions { interval: k, ..options };
                let mut policy: Box<dyn Policy> = match agent {
                    Agent::Model { model, variant } => Box::new(ModelPolicy::new(model, variant)),
                    Agent::Expert => Box::new(ExpertReplay::new(*task, cfg.world.clone(), cfg.model.chunk_horizon)),
                };
                let outcome = rollout(policy.as_mut(), &scene, &[prompt], &options, &cfg.world).with_context(|| format!("rollout {r} of {task}"))?;
                out.push(RolloutRecord {
                    variant: agent.name().to_string(),
                    seed,
                    task: *task,
                    prompt_config: pc,
                    k,
                    rollout: r,
                    level,
                    score: outcome.score,
                    steps: outcome.steps,
                    trace_decodes: outcome.trace_decodes,
                    failure: classify_failure(&outcome, task, &cfg.world),
                });
            }
        }
    }
    Ok(out)
}

/// Aggregated row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub prompt_config: PromptConfig,
    pub k: usize,
    pub mean_score: f64,
    pub n: usize,
    /// Rollout counts per failure class, in [`FailureClass::ALL`] order.
    pub failures: [usize; 6],
}

pub const METRICS_HEADER: &str = "variant,seed,task,prompt_config,k,mean_score,n,none,trace_error,grasp_failure,placement_failure,poke_failure,overflow";

/// Groups rollouts by `(variant, seed, task, prompt config, k)` in sorted
/// order.
pub fn metrics(records: &[RolloutRecord]) -> Vec<MetricsRow> {
    let mut groups: BTreeMap<(String, u64, TaskSpec, PromptConfig, usize), (f64, usize, [usize; 6])> = BTreeMap::new();
    for r in records {
        let g = groups.entry((r.variant.clone(), r.seed, r.task, r.prompt_config, r.k)).or_default();
        g.0 += r.score as f64;
        g.1 += 1;
        g.2[FailureClass::ALL.iter().position(|f| *f == r.failure).unwrap()] += 1;
    }
    groups
        .into_iter()
        .map(|((variant, seed, task, prompt_config, k), (sum, n, failures))| MetricsRow {
            variant,
            seed,
            task,
            prompt_config,
            k,
            mean_score: sum / n as f64,
            n,
            failures,
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let f: Vec<String> = r.failures.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{},{},{},{},{},{:.6},{},{}", r.variant, r.seed, r.task, r.prompt_config, r.k, r.mean_score, r.n, f.join(","));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!("not a metrics table: header mismatch");
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                bail!("row {}: expected 13 fields, got {}", i + 1, f.len());
            }
            let mut failures = [0; 6];
            for (j, slot) in failures.iter_mut().enumerate() {
                *slot = f[7 + j].parse()?;
            }
            Ok(MetricsRow {
                variant: f[0].to_string(),
                seed: f[1].parse()?,
                task: TaskSpec::parse(f[2])?,
                prompt_config: PromptConfig::parse(f[3])?,
                k: f[4].parse()?,
                mean_score: f[5].parse()?,
                n: f[6].parse()?,
                failures,
            })
        })
        .collect()
}

/// Writes `name.csv` (metrics) and `name_rollouts.csv` under `dir`.
pub fn write_tables(dir: &Path, name: &str, records: &[RolloutRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.csv")), metrics_csv(&metrics(records)))?;
    std::fs::write(dir.join(format!("{name}_rollouts.csv")), rollouts_csv(records))?;
    Ok(())
}

pub fn mean_score(records: &[RolloutRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.score as f64).sum::<f64>() / records.len() as f64
}
