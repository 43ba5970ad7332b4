//! In-context imitation learning with visual reasoning traces.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f32` tensors, a reverse-mode tape, AdamW and the
//!   checkpoint container.
//! * [`simworld`]: a deterministic planar tabletop with two rendered camera
//!   views, a scripted expert and task success predicates.
//! * [`traces`]: 5-point gripper polylines in third-view pixel space and the
//!   random reasoning-input masks used during training.
//! * [`seqdata`]: task-disjoint splits, prompt+target sequence assembly,
//!   action-chunk labels and the episode file format.
//! * [`model`]: modality encoders, the causal transformer, the reasoning and
//!   action-chunk heads, and the combined L1 objective.
//! * [`engine`]: teacher-forced training, KV-cached decoding, temporal
//!   ensembling and closed-loop rollouts.

pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod seqdata;
pub mod simworld;
pub mod traces;

pub use error::{Error, Result};
pub use model::{ModelConfig, PolicyModel, Variant};
pub use numerics::{Tape, Tensor, Var};
pub use simworld::{Action, TaskKind, TaskSpec, WorldConfig, WorldState};
pub use traces::ReasoningTrace;
pub use seqdata::Trajectory;
