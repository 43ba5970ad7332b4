use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{dist, step, success, Action, TaskKind, TaskSpec, WorldConfig, WorldState};
use crate::error::{Error, Result};

const XY_TOL: f32 = 0.01;
const Z_TOL: f32 = 0.01;

/// Phase of the scripted expert, derived from the world state alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertPhase {
    /// Travel height, moving above the target object.
    Approach,
    Descend,
    Close,
    /// Grasp attempt failed; open again before retrying.
    Reopen,
    Lift,
    Transport,
    Lower,
    Open,
    /// Task complete, returning to travel height.
    Ascend,
    Done,
}

fn toward(from: f32, to: f32) -> f32 {
    to - from
}

fn phase_and_action(state: &WorldState, task: &TaskSpec, cfg: &WorldConfig) -> Result<(ExpertPhase, [f32; 4])> {
    let target = state.object_of_class(task.object_class()).ok_or_else(|| Error::InfeasibleTask(task.label()))?;
    let [x, y, z, ap] = state.gripper;
    let tp = state.objects[target].pos;
    let ascend_or_done = |z: f32| {
        if z < cfg.travel_height - Z_TOL {
            (ExpertPhase::Ascend, [0.0, 0.0, toward(z, cfg.travel_height), 0.0])
        } else {
            (ExpertPhase::Done, [0.0; 4])
        }
    };
    let approach = |p: [f32; 2]| [toward(x, p[0]), toward(y, p[1]), toward(z, cfg.travel_height), 0.0];

    if task.kind() == TaskKind::Poke {
        if success(state, task, cfg) >= 1.0 {
            return Ok(ascend_or_done(z));
        }
        if dist([x, y], tp) > XY_TOL {
            return Ok((ExpertPhase::Approach, approach(tp)));
        }
        return Ok((ExpertPhase::Descend, [toward(x, tp[0]), toward(y, tp[1]), toward(z, cfg.grasp_height), 0.0]));
    }

    let rc = task.receptacle_class().expect("pick-and-place has a receptacle");
    let rec = state.receptacle_of_class(rc).ok_or_else(|| Error::InfeasibleTask(task.label()))?;
    let rp = state.receptacles[rec].pos;
    if success(state, task, cfg) >= 1.0 && state.held_object.is_none() {
        return Ok(ascend_or_done(z));
    }
    match state.held_object {
        Some(h) if h == target => {
            if dist([x, y], rp) > XY_TOL {
                if z < cfg.travel_height - Z_TOL {
                    Ok((ExpertPhase::Lift, [0.0, 0.0, toward(z, cfg.travel_height), 0.0]))
                } else {
                    Ok((ExpertPhase::Transport, approach(rp)))
                }
            } else if z > cfg.place_height + Z_TOL {
                Ok((ExpertPhase::Lower, [toward(x, rp[0]), toward(y, rp[1]), toward(z, cfg.place_height), 0.0]))
            } else {
                Ok((ExpertPhase::Open, [0.0, 0.0, 0.0, 1.0]))
            }
        }
        Some(_) => Ok((ExpertPhase::Open, [0.0, 0.0, 0.0, 1.0])),
        None => {
            if ap < cfg.close_threshold {
                Ok((ExpertPhase::Reopen, [0.0, 0.0, 0.0, 1.0]))
            } else if dist([x, y], tp) > XY_TOL {
                let mut a = approach(tp);
                a[3] = toward(ap, cfg.home[3]).max(0.0);
                Ok((ExpertPhase::Approach, a))
            } else if z > cfg.grasp_height + Z_TOL {
                Ok((ExpertPhase::Descend, [toward(x, tp[0]), toward(y, tp[1]), toward(z, cfg.grasp_height), 0.0]))
            } else {
                Ok((ExpertPhase::Close, [0.0, 0.0, 0.0, -1.0]))
            }
        }
    }
}

/// Noise-free expert action for `state`, together with its phase.
pub fn expert_action(state: &WorldState, task: &TaskSpec, cfg: &WorldConfig) -> Result<(ExpertPhase, Action)> {
    let (phase, raw) = phase_and_action(state, task, cfg)?;
    Ok((phase, Action::clipped(raw, cfg.max_delta)))
}

/// Scripted demonstrator with optional zero-mean Gaussian action noise.
pub struct Expert {
    noise: Option<Normal<f32>>,
    rng: ChaCha8Rng,
}

impl Expert {
    pub fn new(noise_sigma: f32, seed: u64) -> Self {
        let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
        Self {
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn act(&mut self, state: &WorldState, task: &TaskSpec, cfg: &WorldConfig) -> Result<(ExpertPhase, Action)> {
        let (phase, mut raw) = phase_and_action(state, task, cfg)?;
        raw = Action::clipped(raw, cfg.max_delta).0;
        if let (Some(n), false) = (&self.noise, phase == ExpertPhase::Done) {
            for v in raw.iter_mut() {
                *v += n.sample(&mut self.rng);
            }
        }
        Ok((phase, Action::clipped(raw, cfg.max_delta)))
    }
}

/// Number of steps a noise-free expert needs from `state`, counting the
/// terminal zero-action step; `None` if it does not finish within `limit`.
pub fn expert_episode_len(state: &WorldState, task: &TaskSpec, cfg: &WorldConfig, limit: usize) -> Result<Option<usize>> {
    let mut s = state.clone();
    for n in 1..=limit {
        let (phase, a) = expert_action(&s, task, cfg)?;
        if phase == ExpertPhase::Done {
            return Ok(Some(n));
        }
        s = step(&s, &a, cfg);
    }
    Ok(None)
}
