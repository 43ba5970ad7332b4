//! Teacher-forced training and closed-loop inference.

mod rollout;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{build_loss_batch, ModelConfig, PolicyModel, TokenInput, Variant};
use crate::numerics::{AdamW, AdamWConfig, Tape};
use crate::seqdata::{build_sequence, Trajectory, TOKENS_PER_STEP};
use crate::traces::TRACE_DIM;

pub use crate::model::KvCache;
pub use rollout::{rollout, temporal_ensemble, EnsembleBuffer, ExpertReplay, ModelPolicy, Policy, RolloutOptions, RolloutOutcome, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub optimizer: AdamWConfig,
    /// Linear learning-rate warmup length.
    pub warmup_steps: usize,
    /// After warmup the rate falls linearly to this fraction of its base
    /// value at the last step; 1 keeps it constant.
    pub final_lr_fraction: f32,
    /// Prompt-demo counts drawn uniformly per sequence.
    pub prompt_counts: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            variant: Variant::OURS,
            optimizer: AdamWConfig::default(),
            warmup_steps: 100,
            final_lr_fraction: 1.0,
            prompt_counts: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f32,
    pub action: f32,
    /// Zero when no trace is scored.
    pub reasoning: f32,
    pub grad_norm: f32,
}

/// Trajectories grouped by task label, in label order.
#[derive(Clone, Debug)]
pub struct TaskPools<'a> {
    pools: Vec<(String, Vec<&'a Trajectory>)>,
}

impl<'a> TaskPools<'a> {
    /// Tasks with fewer than two episodes cannot form a prompt+target
    /// sequence and are left out.
    pub fn new(dataset: &'a [Trajectory]) -> Result<Self> {
        let mut by_task: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
        for t in dataset {
            by_task.entry(&t.task_label).or_default().push(t);
        }
        let pools: Vec<_> = by_task.into_iter().filter(|(_, v)| v.len() >= 2).map(|(k, v)| (k.to_string(), v)).collect();
        if pools.is_empty() {
            return Err(invalid("training split has no task with at least two episodes"));
        }
        Ok(Self { pools })
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.pools.iter().map(|(k, _)| k.as_str())
    }
}

pub struct TrainState {
    pub model: PolicyModel,
    pub optimizer: AdamW,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: PolicyModel, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer, &model.params);
        Self {
            model,
            optimizer,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
            history: Vec::new(),
        }
    }

    fn lr_at(&self, config: &TrainConfig) -> f32 {
        let base = config.optimizer.lr;
        if self.step < config.warmup_steps {
            base * (self.step + 1) as f32 / config.warmup_steps as f32
        } else {
            let span = config.steps.saturating_sub(config.warmup_steps).max(1) as f32;
            let done = ((self.step - config.warmup_steps) as f32 / span).min(1.0);
            base * (1.0 - done * (1.0 - config.final_lr_fraction))
        }
    }

    /// One optimisation step on a freshly sampled sequence.
    pub fn train_step(&mut self, pools: &TaskPools, config: &TrainConfig) -> Result<LossRecord> {
        let horizon = self.model.config.chunk_horizon;
        let (_, pool) = &pools.pools[self.rng.random_range(0..pools.pools.len())];
        let wanted = config.prompt_counts[self.rng.random_range(0..config.prompt_counts.len())];
        let n_prompt = wanted.min(pool.len() - 1);
        let picked: Vec<&Trajectory> = index::sample(&mut self.rng, pool.len(), n_prompt + 1).into_iter().map(|i| pool[i]).collect();
        let mut seq = build_sequence(&picked, n_prompt, horizon, &mut self.rng)?;
        // Drop leading prompts until the sequence fits the context.
        let max = self.model.config.max_context;
        while seq.total_steps() * TOKENS_PER_STEP > max && seq.n_prompt > 0 {
            let drop = seq.episodes[0].len();
            seq.episodes.remove(0);
            seq.n_prompt -= 1;
            seq.loss_mask.drain(..drop * TOKENS_PER_STEP);
        }
        if seq.total_steps() * TOKENS_PER_STEP > max {
            return Err(Error::ContextOverflow {
                needed: seq.total_steps() * TOKENS_PER_STEP,
                max,
            });
        }
        let batch = build_loss_batch(&seq, config.variant, horizon)?;
        let (record, grads) = {
            let mut tape = Tape::new();
            let out = self.model.batch_loss(&mut tape, &batch, false)?;
            let total = tape.data(out.total)[0];
            let action = tape.data(out.action)[0];
            let reasoning = out.reasoning.map_or(0.0, |r| tape.data(r)[0]);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    value: total,
                });
            }
            tape.backward(out.total)?;
            let record = LossRecord {
                step: self.step,
                total,
                action,
                reasoning,
                grad_norm: 0.0,
            };
            (record, tape.param_grads()?)
        };
        self.optimizer.config.lr = self.lr_at(config);
        let params = &mut self.model.params;
        params.zero_grads();
        params.accumulate_grads(&grads)?;
        let grad_norm = self.optimizer.step(params)?;
        if !grad_norm.is_finite() || !params.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                value: grad_norm,
            });
        }
        let record = LossRecord { grad_norm, ..record };
        self.history.push(record);
        self.step += 1;
        Ok(record)
    }
}

/// Trains a freshly initialised model (seeded by `config.seed`) for
/// `config.steps` steps, calling `on_step` after each.
pub fn train_with(model_config: ModelConfig, config: &TrainConfig, dataset: &[Trajectory], mut on_step: impl FnMut(&LossRecord)) -> Result<TrainState> {
    if config.prompt_counts.is_empty() {
        return Err(invalid("prompt_counts must not be empty"));
    }
    if !(0.0..=1.0).contains(&config.final_lr_fraction) {
        return Err(invalid(format!("final_lr_fraction {} outside [0, 1]", config.final_lr_fraction)));
    }
    let model = PolicyModel::new(model_config, config.seed)?;
    let mut state = TrainState::new(model, config);
    if config.steps == 0 {
        return Ok(state);
    }
    let pools = TaskPools::new(dataset)?;
    for _ in 0..config.steps {
        let rec = state.train_step(&pools, config)?;
        on_step(&rec);
    }
    Ok(state)
}

pub fn train(model_config: ModelConfig, config: &TrainConfig, dataset: &[Trajectory]) -> Result<TrainState> {
    train_with(model_config, config, dataset, |_| {})
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_endpoints(history: &[LossRecord], window: usize) -> Option<(f32, f32)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |xs: &[LossRecord]| (xs.iter().map(|r| r.total as f64).sum::<f64>() / xs.len() as f64) as f32;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

/// Values produced for the new positions of a decode call.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// `[n, d_model]` final hidden states.
    pub hidden: Vec<f32>,
    /// One trace prediction per new state token.
    pub traces: Vec<[f32; TRACE_DIM]>,
    /// One chunk per new reasoning token, in scaled action units.
    pub chunks: Vec<Vec<f32>>,
}

fn collect(tape: &Tape, model: &PolicyModel, out: &crate::model::Outputs) -> DecodeOutput {
    DecodeOutput {
        hidden: tape.data(out.hidden).to_vec(),
        traces: out.reasoning.map_or_else(Vec::new, |v| tape.data(v).chunks(TRACE_DIM).map(|c| c.try_into().expect("width 10")).collect()),
        chunks: out.chunks.map_or_else(Vec::new, |v| tape.data(v).chunks(model.config.chunk_width()).map(<[f32]>::to_vec).collect()),
    }
}

/// Appends `tokens` to `cache` and returns outputs for the new positions.
/// On error the cache is left unchanged.
pub fn kv_decode(model: &PolicyModel, cache: &mut KvCache, tokens: &[TokenInput]) -> Result<DecodeOutput> {
    let mut tape = Tape::inference();
    let pos0 = cache.len();
    match model.forward(&mut tape, tokens, pos0, Some(cache)) {
        Ok(out) => Ok(collect(&tape, model, &out)),
        Err(e) => {
            cache.truncate(pos0);
            Err(e)
        }
    }
}

/// Full forward over `tokens` from position 0 without a cache.
pub fn full_forward(model: &PolicyModel, tokens: &[TokenInput]) -> Result<DecodeOutput> {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, tokens, 0, None)?;
    Ok(collect(&tape, model, &out))
}
