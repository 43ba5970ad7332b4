use std::collections::VecDeque;

use super::kv_decode;
use crate::error::{invalid, Error, Result};
use crate::model::{KvCache, PolicyModel, TokenInput, Variant};
use crate::seqdata::{observe, Step, Trajectory};
use crate::simworld::{self, expert_action, ExpertPhase, TaskSpec, WorldConfig, WorldState};
use crate::traces::{trace_from_positions, TRACE_DIM};

/// Chunk predictions still covering the current step, oldest first.
#[derive(Clone, Debug)]
pub struct EnsembleBuffer {
    chunks: VecDeque<(usize, Vec<[f32; 4]>)>,
    pub decay: f32,
}

impl EnsembleBuffer {
    pub fn new(decay: f32) -> Self {
        Self {
            chunks: VecDeque::new(),
            decay,
        }
    }

    /// Adds a chunk issued at `step` and drops chunks that no longer cover it.
    pub fn push(&mut self, step: usize, chunk: Vec<[f32; 4]>) {
        self.chunks.push_back((step, chunk));
        self.prune(step);
    }

    pub fn prune(&mut self, step: usize) {
        self.chunks.retain(|(issued, c)| issued + c.len() > step);
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Weighted mean of every buffered prediction for `step`, with weight
/// `exp(−m·age)` and age counted in steps from the oldest covering chunk.
pub fn temporal_ensemble(buffer: &EnsembleBuffer, step: usize) -> Result<[f32; 4]> {
    let covering: Vec<(usize, [f32; 4])> =
        buffer.chunks.iter().filter(|(issued, c)| *issued <= step && step < issued + c.len()).map(|(issued, c)| (*issued, c[step - issued])).collect();
    let oldest = covering.iter().map(|(i, _)| *i).min().ok_or_else(|| invalid(format!("no buffered chunk covers step {step}")))?;
    let mut acc = [0.0f64; 4];
    let mut total = 0.0f64;
    for (issued, a) in &covering {
        let w = (-(buffer.decay as f64) * (issued - oldest) as f64).exp();
        total += w;
        acc.iter_mut().zip(a).for_each(|(s, v)| *s += w * *v as f64);
    }
    Ok(acc.map(|s| (s / total) as f32))
}

/// Token-level interface shared by the learned policy and scripted stubs.
pub trait Policy {
    /// Consumes the prompt demonstrations.
    fn begin(&mut self, prompts: &[&Trajectory]) -> Result<()>;
    /// Consumes the state token; returns a trace prediction when `decode`.
    fn state(&mut self, obs: &Step, world: &WorldState, decode: bool) -> Result<Option<[f32; TRACE_DIM]>>;
    /// Consumes the reasoning token and returns the next action chunk in
    /// world units.
    fn reasoning(&mut self, trace: Option<[f32; TRACE_DIM]>) -> Result<Vec<[f32; 4]>>;
    /// Consumes the executed action.
    fn action(&mut self, action: [f32; 4]) -> Result<()>;
}

/// The trained model decoding against a KV cache.
pub struct ModelPolicy<'m> {
    model: &'m PolicyModel,
    variant: Variant,
    cache: KvCache,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m PolicyModel, variant: Variant) -> Self {
        Self {
            model,
            variant,
            cache: KvCache::new(&model.config),
        }
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }
}

impl Policy for ModelPolicy<'_> {
    fn begin(&mut self, prompts: &[&Trajectory]) -> Result<()> {
        self.cache.clear();
        let mut tokens = Vec::new();
        for ep in prompts {
            for s in &ep.steps {
                let trace = if self.variant.prompt_reasoning {
                    Some(s.trace.ok_or_else(|| invalid(format!("prompt demo of `{}` lacks traces", ep.task_label)))?)
                } else {
                    None
                };
                tokens.extend([
                    TokenInput::State {
                        third: &s.third,
                        wrist: &s.wrist,
                        proprio: s.proprio,
                    },
                    TokenInput::Reasoning(trace),
                    TokenInput::Action(s.action),
                ]);
            }
        }
        if !tokens.is_empty() {
            kv_decode(self.model, &mut self.cache, &tokens)?;
        }
        Ok(())
    }

    fn state(&mut self, obs: &Step, _world: &WorldState, decode: bool) -> Result<Option<[f32; TRACE_DIM]>> {
        let tok = TokenInput::State {
            third: &obs.third,
            wrist: &obs.wrist,
            proprio: obs.proprio,
        };
        let out = kv_decode(self.model, &mut self.cache, &[tok])?;
        Ok(decode.then(|| out.traces[0].map(|v| v.clamp(0.0, 1.0))))
    }

    fn reasoning(&mut self, trace: Option<[f32; TRACE_DIM]>) -> Result<Vec<[f32; 4]>> {
        let out = kv_decode(self.model, &mut self.cache, &[TokenInput::Reasoning(trace)])?;
        let k = self.model.config.action_scale;
        Ok(out.chunks[0].chunks(4).map(|a| [a[0] / k, a[1] / k, a[2] / k, a[3] / k]).collect())
    }

    fn action(&mut self, action: [f32; 4]) -> Result<()> {
        kv_decode(self.model, &mut self.cache, &[TokenInput::Action(action)])?;
        Ok(())
    }
}

/// Scripted stand-in that predicts what the noise-free expert would do from
/// the current state.
pub struct ExpertReplay {
    task: TaskSpec,
    world: WorldConfig,
    horizon: usize,
    current: Option<WorldState>,
}

impl ExpertReplay {
    pub fn new(task: TaskSpec, world: WorldConfig, horizon: usize) -> Self {
        Self {
            task,
            world,
            horizon,
            current: None,
        }
    }

    fn plan(&self, limit: usize) -> Result<(Vec<[f32; 4]>, Vec<[f32; 2]>)> {
        let mut s = self.current.clone().ok_or_else(|| invalid("expert replay has not seen a state"))?;
        let mut actions = Vec::new();
        let mut xy = vec![s.gripper_xy()];
        for _ in 0..limit {
            let (phase, a) = expert_action(&s, &self.task, &self.world)?;
            if phase == ExpertPhase::Done {
                break;
            }
            actions.push(a.as_array());
            s = simworld::step(&s, &a, &self.world);
            xy.push(s.gripper_xy());
        }
        Ok((actions, xy))
    }
}

impl Policy for ExpertReplay {
    fn begin(&mut self, _prompts: &[&Trajectory]) -> Result<()> {
        Ok(())
    }

    fn state(&mut self, _obs: &Step, world: &WorldState, decode: bool) -> Result<Option<[f32; TRACE_DIM]>> {
        self.current = Some(world.clone());
        if !decode {
            return Ok(None);
        }
        let (_, xy) = self.plan(crate::seqdata::MAX_EPISODE_STEPS)?;
        Ok(Some(trace_from_positions(&xy, 0, &self.world.third_camera())?.to_vector()))
    }

    fn reasoning(&mut self, _trace: Option<[f32; TRACE_DIM]>) -> Result<Vec<[f32; 4]>> {
        let (mut actions, _) = self.plan(self.horizon)?;
        actions.resize(self.horizon, [0.0; 4]);
        Ok(actions)
    }

    fn action(&mut self, _action: [f32; 4]) -> Result<()> {
        Ok(())
    }
}

/// A task instance: the scene is rebuilt from these with the rollout seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: TaskSpec,
    pub n_distractor_objects: usize,
    pub n_distractor_receptacles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    /// Decode a trace every `interval` steps; 0 never decodes.
    pub interval: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub ensemble_decay: f32,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            interval: 1,
            max_steps: 300,
            seed: 0,
            ensemble_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutOutcome {
    pub score: f32,
    pub steps: usize,
    /// `(step, trace)` for every decoded trace.
    pub traces: Vec<(usize, [f32; TRACE_DIM])>,
    pub trace_decodes: usize,
    pub overflow: bool,
    pub initial_state: WorldState,
    /// World state when the first trace was decoded.
    pub decision_state: Option<WorldState>,
    pub final_state: WorldState,
    /// Executed steps, exportable with the episode writer.
    pub trajectory: Trajectory,
}

/// Runs one closed-loop episode.
///
/// Per step: state token, then (every `interval` steps) a decoded trace fed
/// back as the reasoning token or else the zero trace, then the chunk, whose
/// ensembled first action is executed and fed back as the action token.
/// Stops on full success or after `max_steps`. Running out of context ends
/// the episode with `overflow` set.
pub fn rollout(policy: &mut dyn Policy, scene: &Scene, prompts: &[&Trajectory], options: &RolloutOptions, world: &WorldConfig) -> Result<RolloutOutcome> {
    if options.max_steps == 0 {
        return Err(invalid("max_steps must be at least 1"));
    }
    let initial = simworld::reset(&scene.task, scene.n_distractor_objects, scene.n_distractor_receptacles, options.seed, world)?;
    let mut state = initial.clone();
    let mut buffer = EnsembleBuffer::new(options.ensemble_decay);
    let mut traces = Vec::new();
    let mut decision_state = None;
    let mut executed = Vec::new();
    let mut overflow = false;
    let mut steps = 0;
    let outcome = (|| -> Result<()> {
        policy.begin(prompts)?;
        for t in 0..options.max_steps {
            let mut obs = observe(&state, [0.0; 4], world);
            let decode = options.interval > 0 && t % options.interval == 0;
            let trace = policy.state(&obs, &state, decode)?;
            if let Some(tr) = trace {
                if decision_state.is_none() {
                    decision_state = Some(state.clone());
                }
                traces.push((t, tr));
            }
            let chunk = policy.reasoning(trace)?;
            buffer.push(t, chunk);
            let action = temporal_ensemble(&buffer, t)?;
            let clipped = simworld::Action::clipped(action, world.max_delta);
            obs.action = clipped.as_array();
            executed.push(obs);
            state = simworld::step(&state, &clipped, world);
            steps = t + 1;
            if simworld::success(&state, &scene.task, world) >= 1.0 {
                break;
            }
            policy.action(clipped.as_array())?;
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => {}
        Err(Error::ContextOverflow { .. }) => overflow = true,
        Err(e) => return Err(e),
    }
    Ok(RolloutOutcome {
        score: simworld::success(&state, &scene.task, world),
        steps,
        trace_decodes: traces.len(),
        traces,
        overflow,
        initial_state: initial,
        decision_state,
        final_state: state,
        trajectory: Trajectory {
            task_label: scene.task.label(),
            meta: crate::seqdata::EpisodeMeta {
                seed: options.seed,
                n_distractor_objects: scene.n_distractor_objects,
                n_distractor_receptacles: scene.n_distractor_receptacles,
            },
            steps: executed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_examples() {
        let mut b = EnsembleBuffer::new(0.1);
        b.push(0, vec![[0.0; 4], [0.0; 4]]);
        assert_eq!(temporal_ensemble(&b, 0).unwrap(), [0.0; 4]);
        b.push(1, vec![[0.1; 4], [0.2; 4]]);
        let got = temporal_ensemble(&b, 1).unwrap()[0];
        let w = (-0.1f64).exp();
        assert!((got as f64 - 0.1 * w / (1.0 + w)).abs() < 1e-7);
        assert!((got - 0.0475).abs() < 1e-4);
        b.prune(2);
        assert_eq!(b.len(), 1);
        assert!(temporal_ensemble(&EnsembleBuffer::new(0.1), 0).is_err());
    }

    #[test]
    fn horizon_one_uses_latest() {
        let mut b = EnsembleBuffer::new(0.1);
        for t in 0..5 {
            b.push(t, vec![[t as f32; 4]]);
            assert_eq!(temporal_ensemble(&b, t).unwrap(), [t as f32; 4]);
            assert_eq!(b.len(), 1);
        }
    }
}
