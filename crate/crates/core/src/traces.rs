//! Visual reasoning traces and reasoning-input masks.
//!
//! A trace at step `t` is the gripper's third-view pixel position at five
//! time indices spread evenly from `t` to the terminal step, normalised to
//! `[0, 1]` by the image resolution.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seqdata::Trajectory;
use crate::simworld::{project_to_pixel, CameraModel};

pub const TRACE_POINTS: usize = 5;
pub const TRACE_DIM: usize = 2 * TRACE_POINTS;

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningTrace {
    pub points: [[f32; 2]; TRACE_POINTS],
    pub source_indices: [usize; TRACE_POINTS],
}

impl ReasoningTrace {
    /// Flattened `(u0, v0, u1, v1, …)`.
    pub fn to_vector(&self) -> [f32; TRACE_DIM] {
        let mut v = [0.0; TRACE_DIM];
        for (j, p) in self.points.iter().enumerate() {
            v[2 * j] = p[0];
            v[2 * j + 1] = p[1];
        }
        v
    }
}

/// Time indices `t + round_half_up(j·(T−1−t)/4)` for `j = 0..5`.
pub fn trace_indices(len: usize, t: usize) -> [usize; TRACE_POINTS] {
    let horizon = (len - 1 - t) as u64;
    let segs = (TRACE_POINTS - 1) as u64;
    // round_half_up(j·h/4) = floor((2·j·h + 4) / 8)
    std::array::from_fn(|j| t + ((2 * j as u64 * horizon + segs) / (2 * segs)) as usize)
}

/// Builds the trace for step `t` from a sequence of gripper table positions.
pub fn trace_from_positions(gripper_xy: &[[f32; 2]], t: usize, camera: &CameraModel) -> Result<ReasoningTrace> {
    if gripper_xy.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if t >= gripper_xy.len() {
        return Err(Error::InvalidArgument(format!("step {t} outside an episode of length {}", gripper_xy.len())));
    }
    let source_indices = trace_indices(gripper_xy.len(), t);
    let g = camera.resolution as f32;
    let points = source_indices.map(|i| {
        let [u, v] = project_to_pixel(gripper_xy[i], camera);
        [(u / g).clamp(0.0, 1.0), (v / g).clamp(0.0, 1.0)]
    });
    Ok(ReasoningTrace { points, source_indices })
}

/// Trace for step `t` of a trajectory, using its proprioceptive gripper pose.
pub fn generate_trace(trajectory: &Trajectory, t: usize, camera: &CameraModel) -> Result<ReasoningTrace> {
    let xy: Vec<[f32; 2]> = trajectory.steps.iter().map(|s| [s.proprio[0], s.proprio[1]]).collect();
    trace_from_positions(&xy, t, camera)
}

/// Attaches a trace to every step of every trajectory, replacing any existing
/// ones; all other fields are left untouched.
pub fn augment_dataset(trajectories: &mut [Trajectory], camera: &CameraModel) -> Result<()> {
    for traj in trajectories.iter_mut() {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let xy: Vec<[f32; 2]> = traj.steps.iter().map(|s| [s.proprio[0], s.proprio[1]]).collect();
        for t in 0..xy.len() {
            let tr = trace_from_positions(&xy, t, camera)?;
            traj.steps[t].trace = Some(tr.to_vector());
        }
    }
    Ok(())
}

/// Which target steps have their reasoning input replaced by the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ratio: f32,
    pub masked_positions: BTreeSet<usize>,
}

/// Draws a ratio uniformly from `[0, 1]`, then masks `floor(ratio·n)` target
/// steps chosen uniformly without replacement.
pub fn sample_mask(n_target_steps: usize, rng: &mut impl Rng) -> MaskPlan {
    let ratio: f32 = rng.random_range(0.0..=1.0);
    mask_with_ratio(n_target_steps, ratio, rng)
}

pub fn mask_with_ratio(n_target_steps: usize, ratio: f32, rng: &mut impl Rng) -> MaskPlan {
    let ratio = ratio.clamp(0.0, 1.0);
    let count = ((ratio as f64 * n_target_steps as f64).floor() as usize).min(n_target_steps);
    let masked_positions = index::sample(rng, n_target_steps, count).into_iter().collect();
    MaskPlan { ratio, masked_positions }
}
