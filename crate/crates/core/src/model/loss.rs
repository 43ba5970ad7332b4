//! Combined L1 objective over action chunks and reasoning traces.

use super::{Outputs, PolicyModel, TokenInput, Variant};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::seqdata::{chunk_labels, TrainingSequence, TOKENS_PER_STEP};
use crate::traces::TRACE_DIM;

/// Model inputs and per-element labels for one training sequence.
#[derive(Clone, Debug)]
pub struct LossBatch<'a> {
    pub tokens: Vec<TokenInput<'a>>,
    /// `[S, 10]`, one row per step.
    pub trace_labels: Vec<f32>,
    pub trace_mask: Vec<bool>,
    /// `[S, H·4]` in scaled action units, one row per step.
    pub chunk_labels: Vec<f32>,
    pub chunk_mask: Vec<bool>,
}

pub struct LossOutput {
    pub total: Var,
    pub action: Var,
    /// `None` when no trace element is scored.
    pub reasoning: Option<Var>,
    pub trace_labels: Var,
    pub chunk_labels: Var,
    pub outputs: Outputs,
}

/// Mean absolute error over the elements selected by `mask`; `None` if the
/// mask selects nothing.
pub fn l1_term(tape: &mut Tape, pred: Var, label: Var, mask: &[bool]) -> Result<Option<Var>> {
    if !mask.iter().any(|m| *m) {
        return Ok(None);
    }
    let diff = tape.sub(pred, label)?;
    let diff = tape.abs(diff)?;
    tape.masked_mean(diff, mask.to_vec()).map(Some)
}

/// `L_action + λ·L_reasoning`; a missing reasoning term contributes 0.
pub fn combine_terms(tape: &mut Tape, action: Var, reasoning: Option<Var>, reasoning_weight: f32) -> Result<Var> {
    match reasoning {
        Some(r) => {
            let r = tape.scale(r, reasoning_weight)?;
            tape.add(action, r)
        }
        None => Ok(action),
    }
}

fn trace_of(step: &crate::seqdata::Step, label: &str) -> Result<[f32; TRACE_DIM]> {
    step.trace.ok_or_else(|| invalid(format!("episode of `{label}` has no reasoning traces")))
}

/// Assembles tokens and labels for `seq` under `variant`'s reasoning flags.
///
/// Reasoning inputs: prompt steps carry their trace when prompt reasoning is
/// on; target steps carry it when target reasoning is on and the step is not
/// masked. Every other reasoning input is the zero vector. Prompt steps get
/// labels too, but their mask is always off.
pub fn build_loss_batch<'a>(seq: &TrainingSequence<'a>, variant: Variant, horizon: usize) -> Result<LossBatch<'a>> {
    let total = seq.total_steps();
    if seq.loss_mask.len() != total * TOKENS_PER_STEP || seq.reasoning_input_mask.len() != seq.target_steps() {
        return Err(invalid("training sequence masks do not match its steps"));
    }
    let width = horizon * 4;
    let mut batch = LossBatch {
        tokens: Vec::with_capacity(total * TOKENS_PER_STEP),
        trace_labels: Vec::with_capacity(total * TRACE_DIM),
        trace_mask: Vec::with_capacity(total * TRACE_DIM),
        chunk_labels: Vec::with_capacity(total * width),
        chunk_mask: Vec::with_capacity(total * width),
    };
    let mut g = 0;
    let mut target_idx = 0;
    for (ei, ep) in seq.episodes.iter().enumerate() {
        let is_prompt = ei < seq.n_prompt;
        let actions = ep.actions();
        for (t, step) in ep.steps.iter().enumerate() {
            batch.tokens.push(TokenInput::State {
                third: &step.third,
                wrist: &step.wrist,
                proprio: step.proprio,
            });
            let carries = if is_prompt {
                variant.prompt_reasoning
            } else {
                variant.target_reasoning && !seq.reasoning_input_mask[target_idx]
            };
            let input = if carries { Some(trace_of(step, &ep.task_label)?) } else { None };
            batch.tokens.push(TokenInput::Reasoning(input));
            batch.tokens.push(TokenInput::Action(step.action));

            let score_trace = seq.loss_mask[g * TOKENS_PER_STEP] && variant.target_reasoning;
            let trace = if score_trace { trace_of(step, &ep.task_label)? } else { step.trace.unwrap_or([0.0; TRACE_DIM]) };
            batch.trace_labels.extend_from_slice(&trace);
            batch.trace_mask.extend(std::iter::repeat_n(score_trace, TRACE_DIM));

            let (chunk, valid) = if is_prompt {
                chunk_labels(&actions, t, horizon)
            } else {
                let l = &seq.chunk_labels[target_idx];
                if l.actions.len() != horizon {
                    return Err(invalid(format!("chunk labels of length {} for horizon {horizon}", l.actions.len())));
                }
                (l.actions.clone(), l.valid.clone())
            };
            let scored = seq.loss_mask[g * TOKENS_PER_STEP + 1];
            for (a, v) in chunk.iter().zip(&valid) {
                batch.chunk_labels.extend_from_slice(a);
                batch.chunk_mask.extend(std::iter::repeat_n(scored && *v, 4));
            }
            if !is_prompt {
                target_idx += 1;
            }
            g += 1;
        }
    }
    Ok(batch)
}

impl PolicyModel {
    /// Teacher-forced forward over `batch` and the combined loss. With
    /// `label_grads`, the label tensors are differentiable inputs.
    pub fn batch_loss<'p>(&'p self, tape: &mut Tape<'p>, batch: &LossBatch, label_grads: bool) -> Result<LossOutput> {
        let c = &self.config;
        let steps = batch.tokens.len() / TOKENS_PER_STEP;
        let width = c.chunk_width();
        if batch.tokens.len() % TOKENS_PER_STEP != 0
            || batch.trace_labels.len() != steps * TRACE_DIM
            || batch.trace_mask.len() != batch.trace_labels.len()
            || batch.chunk_labels.len() != steps * width
            || batch.chunk_mask.len() != batch.chunk_labels.len()
        {
            return Err(invalid("loss batch labels do not match its tokens"));
        }
        let outputs = self.forward(tape, &batch.tokens, 0, None)?;
        let leaf = |shape: [usize; 2], data: Vec<f32>| -> Result<Tensor> {
            let t = Tensor::new(shape, data)?;
            Ok(if label_grads { t.requiring_grad() } else { t })
        };
        let trace_labels = tape.leaf(leaf([steps, TRACE_DIM], batch.trace_labels.clone())?);
        let scale = c.action_scale;
        let chunk_labels = tape.leaf(leaf([steps, width], batch.chunk_labels.iter().map(|v| v * scale).collect())?);
        let chunks = outputs.chunks.ok_or(Error::EmptyLossMask)?;
        let action = l1_term(tape, chunks, chunk_labels, &batch.chunk_mask)?.ok_or(Error::EmptyLossMask)?;
        let reasoning = match outputs.reasoning {
            Some(pred) => l1_term(tape, pred, trace_labels, &batch.trace_mask)?,
            None => None,
        };
        let total = combine_terms(tape, action, reasoning, c.reasoning_weight)?;
        Ok(LossOutput {
            total,
            action,
            reasoning,
            trace_labels,
            chunk_labels,
            outputs,
        })
    }
}
