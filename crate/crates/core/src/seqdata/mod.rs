//! Trajectories, task-disjoint splits, and prompt+target training sequences.

mod io;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::simworld::{self, render, Expert, ExpertPhase, TaskSpec, WorldConfig, WorldState};
use crate::traces::{sample_mask, TRACE_DIM};

pub use io::{load_episodes, read_episodes, save_episodes, write_episodes, EPISODE_MAGIC, EPISODE_VERSION};

/// One recorded time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// Third-view RGB image, row-major, `G × G × 3`.
    pub third: Vec<f32>,
    /// Wrist-view RGB image, row-major, `C × C × 3`.
    pub wrist: Vec<f32>,
    pub proprio: [f32; 4],
    pub trace: Option<[f32; TRACE_DIM]>,
    pub action: [f32; 4],
}

/// Scene provenance of a recorded episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub n_distractor_objects: usize,
    pub n_distractor_receptacles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_label: String,
    pub meta: EpisodeMeta,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<[f32; 4]> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn has_traces(&self) -> bool {
        self.steps.iter().all(|s| s.trace.is_some())
    }
}

/// Records one observation of `state` with the action taken from it.
pub fn observe(state: &WorldState, action: [f32; 4], cfg: &WorldConfig) -> Step {
    Step {
        third: render(state, &cfg.third_camera()).data,
        wrist: render(state, &cfg.wrist_camera()).data,
        proprio: state.proprio(),
        trace: None,
        action,
    }
}

pub const MAX_EPISODE_STEPS: usize = 400;

/// Runs the scripted expert on a fresh scene and records the episode, ending
/// with a zero-action step at the terminal state. Returns the final world
/// state alongside the trajectory (without traces).
pub fn record_expert_episode(task: &TaskSpec, meta: EpisodeMeta, noise_sigma: f32, cfg: &WorldConfig) -> Result<(Trajectory, WorldState)> {
    let mut state = simworld::reset(task, meta.n_distractor_objects, meta.n_distractor_receptacles, meta.seed, cfg)?;
    let mut expert = Expert::new(noise_sigma, meta.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut steps = Vec::new();
    for _ in 0..MAX_EPISODE_STEPS {
        let (phase, action) = expert.act(&state, task, cfg)?;
        if phase == ExpertPhase::Done {
            steps.push(observe(&state, [0.0; 4], cfg));
            return Ok((
                Trajectory {
                    task_label: task.label(),
                    meta,
                    steps,
                },
                state,
            ));
        }
        steps.push(observe(&state, action.as_array(), cfg));
        state = simworld::step(&state, &action, cfg);
    }
    Err(invalid(format!("expert did not finish {task} within {MAX_EPISODE_STEPS} steps")))
}

/// Train/test partition at the task-label level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_tasks: BTreeSet<String>,
    pub test_tasks: BTreeSet<String>,
    pub seed: u64,
}

/// Seeded shuffle of the distinct labels, then the first
/// `round(test_fraction·n)` become test tasks.
pub fn split_tasks(task_labels: &[String], test_fraction: f32, seed: u64) -> Result<SplitSpec> {
    let mut labels: Vec<String> = task_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return Err(invalid("a split needs at least two task labels"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid(format!("test fraction {test_fraction} must be in (0, 1)")));
    }
    let n_test = (test_fraction as f64 * labels.len() as f64).round() as usize;
    if n_test == 0 || n_test == labels.len() {
        return Err(invalid(format!("test fraction {test_fraction} leaves one side of a {}-task split empty", labels.len())));
    }
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitSpec {
        test_tasks: labels[..n_test].iter().cloned().collect(),
        train_tasks: labels[n_test..].iter().cloned().collect(),
        seed,
    })
}

/// Token roles within one step, in sequence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    State,
    Reasoning,
    Action,
}

pub const TOKENS_PER_STEP: usize = 3;

impl Role {
    pub fn of_position(pos: usize) -> Role {
        match pos % TOKENS_PER_STEP {
            0 => Role::State,
            1 => Role::Reasoning,
            _ => Role::Action,
        }
    }
}

/// `H` future actions from step `t`, padded past the episode end by repeating
/// the final action with its validity flag cleared.
pub fn chunk_labels(actions: &[[f32; 4]], t: usize, horizon: usize) -> (Vec<[f32; 4]>, Vec<bool>) {
    let last = actions.len() - 1;
    (0..horizon)
        .map(|j| {
            let i = t + j;
            if i <= last {
                (actions[i], true)
            } else {
                (actions[last], false)
            }
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkLabel {
    pub actions: Vec<[f32; 4]>,
    pub valid: Vec<bool>,
}

/// Prompt demonstrations followed by one or more target episodes of the same
/// task.
#[derive(Clone, Debug)]
pub struct TrainingSequence<'a> {
    pub episodes: Vec<&'a Trajectory>,
    pub n_prompt: usize,
    /// One flag per token position; true where a prediction is scored.
    pub loss_mask: Vec<bool>,
    /// One flag per target step; true where the reasoning input is zeroed.
    pub reasoning_input_mask: Vec<bool>,
    /// One label per target step.
    pub chunk_labels: Vec<ChunkLabel>,
}

impl TrainingSequence<'_> {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn prompt_steps(&self) -> usize {
        self.episodes[..self.n_prompt].iter().map(|e| e.len()).sum()
    }

    pub fn target_steps(&self) -> usize {
        self.total_steps() - self.prompt_steps()
    }

    /// All steps in sequence order with `(is_prompt, target_index)`.
    pub fn steps(&self) -> impl Iterator<Item = (&Step, bool, Option<usize>)> + '_ {
        let mut target_idx = 0;
        self.episodes.iter().enumerate().flat_map(move |(e, ep)| ep.steps.iter().map(move |s| (s, e < self.n_prompt))).map(move |(s, p)| {
            if p {
                (s, true, None)
            } else {
                target_idx += 1;
                (s, false, Some(target_idx - 1))
            }
        })
    }
}

/// Builds one sequence from trajectories of a single task: `n_prompt` of them
/// chosen at random become the prompt, the rest (in random order) are targets.
pub fn build_sequence<'a>(subset: &[&'a Trajectory], n_prompt: usize, horizon: usize, rng: &mut impl Rng) -> Result<TrainingSequence<'a>> {
    if subset.len() <= n_prompt {
        return Err(invalid(format!("{} trajectories leave no target after {n_prompt} prompts", subset.len())));
    }
    let label = &subset[0].task_label;
    if let Some(other) = subset.iter().find(|t| &t.task_label != label) {
        return Err(invalid(format!("mixed task labels `{label}` and `{}`", other.task_label)));
    }
    let mut episodes = subset.to_vec();
    episodes.shuffle(rng);
    let mut seq = sequence_from_order(episodes, n_prompt, horizon)?;
    let plan = sample_mask(seq.target_steps(), rng);
    for p in plan.masked_positions {
        seq.reasoning_input_mask[p] = true;
    }
    Ok(seq)
}

/// Lays out a sequence with a fixed episode order and no reasoning masking.
pub fn sequence_from_order<'a>(episodes: Vec<&'a Trajectory>, n_prompt: usize, horizon: usize) -> Result<TrainingSequence<'a>> {
    if episodes.len() <= n_prompt {
        return Err(invalid("a training sequence needs at least one target episode"));
    }
    if horizon == 0 {
        return Err(invalid("chunk horizon must be at least 1"));
    }
    if let Some(e) = episodes.iter().find(|e| e.is_empty()) {
        return Err(invalid(format!("empty episode for task `{}`", e.task_label)));
    }
    let mut loss_mask = Vec::new();
    let mut chunk = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let target = e >= n_prompt;
        let actions = ep.actions();
        for t in 0..ep.len() {
            loss_mask.extend([target, target, false]);
            if target {
                let (actions, valid) = chunk_labels(&actions, t, horizon);
                chunk.push(ChunkLabel { actions, valid });
            }
        }
    }
    let n_target = chunk.len();
    Ok(TrainingSequence {
        episodes,
        n_prompt,
        loss_mask,
        reasoning_input_mask: vec![false; n_target],
        chunk_labels: chunk,
    })
}
