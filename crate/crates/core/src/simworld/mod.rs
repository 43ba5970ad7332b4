//! Planar tabletop world.
//!
//! The table is the unit square seen from above; the gripper additionally has
//! a height `z` and an `aperture`, both in `[0, 1]`. Physics is kinematic: a
//! closing gripper low over an object attaches it, the object then follows
//! the gripper, and opening the gripper drops it in place.

mod expert;
mod render;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

pub use expert::{expert_action, expert_episode_len, Expert, ExpertPhase};
pub use render::{project_to_pixel, render, CameraModel, CameraView, Image, OBJECT_PALETTE, RECEPTACLE_PALETTE};

/// Scene and kinematics parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub third_res: usize,
    pub wrist_res: usize,
    pub wrist_window: f32,
    pub max_delta: f32,
    pub grasp_radius: f32,
    pub z_grasp: f32,
    pub close_threshold: f32,
    pub open_threshold: f32,
    pub poke_displacement: f32,
    pub object_radius: f32,
    pub receptacle_radius: f32,
    pub placement_margin: f32,
    pub home: [f32; 4],
    pub travel_height: f32,
    pub grasp_height: f32,
    pub place_height: f32,
    pub n_object_classes: usize,
    pub n_receptacle_classes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            third_res: 32,
            wrist_res: 16,
            wrist_window: 0.25,
            max_delta: 0.05,
            grasp_radius: 0.06,
            z_grasp: 0.2,
            close_threshold: 0.3,
            open_threshold: 0.7,
            poke_displacement: 0.03,
            object_radius: 0.05,
            receptacle_radius: 0.1,
            placement_margin: 0.02,
            home: [0.5, 0.5, 0.5, 0.8],
            travel_height: 0.4,
            grasp_height: 0.1,
            place_height: 0.15,
            n_object_classes: OBJECT_PALETTE.len(),
            n_receptacle_classes: RECEPTACLE_PALETTE.len(),
        }
    }
}

impl WorldConfig {
    pub fn third_camera(&self) -> CameraModel {
        CameraModel::third(self.third_res)
    }

    pub fn wrist_camera(&self) -> CameraModel {
        CameraModel::wrist(self.wrist_res, self.wrist_window)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    Poke,
    PickPlace,
}

/// What the robot is asked to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskSpec {
    kind: TaskKind,
    target_object_class: usize,
    target_receptacle_class: Option<usize>,
}

impl TaskSpec {
    pub fn poke(object_class: usize) -> Self {
        Self {
            kind: TaskKind::Poke,
            target_object_class: object_class,
            target_receptacle_class: None,
        }
    }

    pub fn pick_place(object_class: usize, receptacle_class: usize) -> Self {
        Self {
            kind: TaskKind::PickPlace,
            target_object_class: object_class,
            target_receptacle_class: Some(receptacle_class),
        }
    }

    pub fn new(kind: TaskKind, object_class: usize, receptacle_class: Option<usize>) -> Result<Self> {
        match (kind, receptacle_class) {
            (TaskKind::Poke, None) => Ok(Self::poke(object_class)),
            (TaskKind::PickPlace, Some(r)) => Ok(Self::pick_place(object_class, r)),
            (TaskKind::Poke, Some(_)) => Err(invalid("a poke task has no receptacle")),
            (TaskKind::PickPlace, None) => Err(invalid("a pick-and-place task needs a receptacle")),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn object_class(&self) -> usize {
        self.target_object_class
    }

    pub fn receptacle_class(&self) -> Option<usize> {
        self.target_receptacle_class
    }

    /// Stable textual label, e.g. `poke:3` or `pick_place:2->1`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn parse(label: &str) -> Result<Self> {
        let bad = || invalid(format!("unrecognised task label `{label}`"));
        if let Some(c) = label.strip_prefix("poke:") {
            return Ok(Self::poke(c.parse().map_err(|_| bad())?));
        }
        if let Some(rest) = label.strip_prefix("pick_place:") {
            let (o, r) = rest.split_once("->").ok_or_else(bad)?;
            return Ok(Self::pick_place(o.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target_receptacle_class {
            None => write!(f, "poke:{}", self.target_object_class),
            Some(r) => write!(f, "pick_place:{}->{}", self.target_object_class, r),
        }
    }
}

/// A control command: deltas on `(x, y, z, aperture)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action(pub(crate) [f32; 4]);

impl Action {
    pub const ZERO: Action = Action([0.0; 4]);

    /// Clips each component to `±max_delta`.
    pub fn clipped(v: [f32; 4], max_delta: f32) -> Self {
        Action(v.map(|x| if x.is_finite() { x.clamp(-max_delta, max_delta) } else { 0.0 }))
    }

    pub fn as_array(&self) -> [f32; 4] {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub class_id: usize,
    pub pos: [f32; 2],
    pub radius: f32,
}

/// Full simulator state, including the latched event flags the success
/// predicates need.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    /// `(x, y, z, aperture)`.
    pub gripper: [f32; 4],
    pub objects: Vec<Entity>,
    pub receptacles: Vec<Entity>,
    pub held_object: Option<usize>,
    pub step_count: usize,
    pub initial_positions: Vec<[f32; 2]>,
    pub max_displacement: Vec<f32>,
    pub ever_held: Vec<bool>,
    pub contacted: Vec<bool>,
    /// `(object, receptacle)` pairs for every release inside a receptacle.
    pub placements: Vec<(usize, usize)>,
}

pub(crate) fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn gripper_xy(&self) -> [f32; 2] {
        [self.gripper[0], self.gripper[1]]
    }

    pub fn object_of_class(&self, class_id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.class_id == class_id)
    }

    pub fn receptacle_of_class(&self, class_id: usize) -> Option<usize> {
        self.receptacles.iter().position(|r| r.class_id == class_id)
    }

    /// Proprioception vector: the absolute gripper pose.
    pub fn proprio(&self) -> [f32; 4] {
        self.gripper
    }
}

/// Samples a scene containing the task's target object (and receptacle) plus
/// distractors of other classes, with no two footprints overlapping.
pub fn reset(task: &TaskSpec, n_distractor_objects: usize, n_distractor_receptacles: usize, seed: u64, cfg: &WorldConfig) -> Result<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if task.object_class() >= cfg.n_object_classes {
        return Err(invalid(format!("object class {} out of range", task.object_class())));
    }
    if n_distractor_objects + 1 > cfg.n_object_classes {
        return Err(invalid(format!("{n_distractor_objects} distractor objects need more than {} classes", cfg.n_object_classes)));
    }
    let needed_rec = n_distractor_receptacles + usize::from(task.receptacle_class().is_some());
    if needed_rec > cfg.n_receptacle_classes {
        return Err(invalid(format!("{needed_rec} receptacles need more than {} classes", cfg.n_receptacle_classes)));
    }
    if let Some(r) = task.receptacle_class() {
        if r >= cfg.n_receptacle_classes {
            return Err(invalid(format!("receptacle class {r} out of range")));
        }
    }

    let mut obj_classes = vec![task.object_class()];
    obj_classes.extend(sample_other_classes(&mut rng, cfg.n_object_classes, task.object_class(), n_distractor_objects));
    let mut rec_classes: Vec<usize> = task.receptacle_class().into_iter().collect();
    let excluded = task.receptacle_class().unwrap_or(usize::MAX);
    rec_classes.extend(sample_other_classes(&mut rng, cfg.n_receptacle_classes, excluded, n_distractor_receptacles));

    // Receptacles first: they are larger and harder to fit.
    let mut placed: Vec<([f32; 2], f32)> = Vec::new();
    let mut receptacles = Vec::new();
    for c in rec_classes {
        let pos = place(&mut rng, &placed, cfg.receptacle_radius, cfg, &format!("receptacle class {c}"))?;
        placed.push((pos, cfg.receptacle_radius));
        receptacles.push(Entity {
            class_id: c,
            pos,
            radius: cfg.receptacle_radius,
        });
    }
    let mut objects = Vec::new();
    for c in obj_classes {
        let pos = place(&mut rng, &placed, cfg.object_radius, cfg, &format!("object class {c}"))?;
        placed.push((pos, cfg.object_radius));
        objects.push(Entity {
            class_id: c,
            pos,
            radius: cfg.object_radius,
        });
    }
    let n = objects.len();
    Ok(WorldState {
        gripper: cfg.home,
        initial_positions: objects.iter().map(|o| o.pos).collect(),
        objects,
        receptacles,
        held_object: None,
        step_count: 0,
        max_displacement: vec![0.0; n],
        ever_held: vec![false; n],
        contacted: vec![false; n],
        placements: Vec::new(),
    })
}

fn sample_other_classes(rng: &mut impl Rng, n_classes: usize, exclude: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_classes).filter(|&c| c != exclude).collect();
    // Partial Fisher-Yates.
    for i in 0..count.min(pool.len()) {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn place(rng: &mut impl Rng, placed: &[([f32; 2], f32)], radius: f32, cfg: &WorldConfig, what: &str) -> Result<[f32; 2]> {
    let lo = radius + cfg.placement_margin;
    let hi = 1.0 - lo;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let p = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        if placed.iter().all(|(q, r)| dist(p, *q) > radius + r + cfg.placement_margin) {
            return Ok(p);
        }
    }
    Err(Error::Placement {
        what: what.to_string(),
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

/// Advances the world by one control step.
pub fn step(state: &WorldState, action: &Action, cfg: &WorldConfig) -> WorldState {
    let mut s = state.clone();
    let a = Action::clipped(action.0, cfg.max_delta).0;
    let prev_aperture = s.gripper[3];
    for (g, d) in s.gripper.iter_mut().zip(a) {
        *g = (*g + d).clamp(0.0, 1.0);
    }
    let [gx, gy, gz, aperture] = s.gripper;
    let low = gz < cfg.z_grasp;

    match s.held_object {
        None if prev_aperture >= cfg.close_threshold && aperture < cfg.close_threshold && low => {
            let nearest = s
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, dist(o.pos, [gx, gy])))
                .filter(|(_, d)| *d <= cfg.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                s.held_object = Some(i);
                s.ever_held[i] = true;
            }
        }
        Some(i) if prev_aperture <= cfg.open_threshold && aperture > cfg.open_threshold => {
            s.held_object = None;
            let p = s.objects[i].pos;
            let inside = s
                .receptacles
                .iter()
                .enumerate()
                .filter(|(_, r)| dist(r.pos, p) <= r.radius)
                .min_by(|a, b| dist(a.1.pos, p).total_cmp(&dist(b.1.pos, p)));
            if let Some((r, _)) = inside {
                s.placements.push((i, r));
            }
        }
        _ => {}
    }
    if let Some(i) = s.held_object {
        s.objects[i].pos = [gx, gy];
    }
    for i in 0..s.objects.len() {
        let p = s.objects[i].pos;
        if low && dist(p, [gx, gy]) <= cfg.grasp_radius {
            s.contacted[i] = true;
        }
        let d = dist(p, s.initial_positions[i]);
        if d > s.max_displacement[i] {
            s.max_displacement[i] = d;
        }
    }
    s.step_count += 1;
    s
}

/// Task score in `{0, 0.5, 1}`.
pub fn success(state: &WorldState, task: &TaskSpec, cfg: &WorldConfig) -> f32 {
    let Some(t) = state.object_of_class(task.object_class()) else {
        return 0.0;
    };
    match task.receptacle_class() {
        None => {
            if state.contacted[t] || state.max_displacement[t] > cfg.poke_displacement {
                1.0
            } else {
                0.0
            }
        }
        Some(rc) => {
            let placed = state.placements.iter().any(|&(o, r)| o == t && state.receptacles[r].class_id == rc);
            if placed {
                1.0
            } else if state.ever_held[t] {
                0.5
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn reset_counts() {
        let s = reset(&TaskSpec::poke(3), 0, 0, 0, &cfg()).unwrap();
        assert_eq!((s.objects.len(), s.receptacles.len()), (1, 0));
        assert_eq!(s.objects[0].class_id, 3);
        let s = reset(&TaskSpec::pick_place(1, 2), 2, 1, 5, &cfg()).unwrap();
        assert_eq!((s.objects.len(), s.receptacles.len()), (3, 2));
        assert_eq!(s.gripper, cfg().home);
    }

    #[test]
    fn reset_is_deterministic_and_non_overlapping() {
        let c = cfg();
        for seed in 0..200 {
            let a = reset(&TaskSpec::pick_place(0, 0), 4, 2, seed, &c).unwrap();
            assert_eq!(a, reset(&TaskSpec::pick_place(0, 0), 4, 2, seed, &c).unwrap());
            let all: Vec<_> = a.receptacles.iter().chain(&a.objects).collect();
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    assert!(dist(all[i].pos, all[j].pos) > all[i].radius + all[j].radius + c.placement_margin);
                }
            }
            let mut classes: Vec<_> = a.objects.iter().map(|o| o.class_id).collect();
            classes.dedup();
            assert_eq!(classes.len(), a.objects.len());
        }
    }

    #[test]
    fn reset_rejects_too_many_distractors() {
        assert!(reset(&TaskSpec::pick_place(0, 0), 1, 3, 0, &cfg()).is_err());
        assert!(reset(&TaskSpec::poke(0), 8, 0, 0, &cfg()).is_err());
    }

    #[test]
    fn placement_failure_is_an_error() {
        let mut c = cfg();
        c.object_radius = 0.3;
        let err = reset(&TaskSpec::poke(0), 3, 0, 0, &c).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }));
    }

    #[test]
    fn zero_action_only_counts_the_step() {
        let s = reset(&TaskSpec::pick_place(1, 0), 2, 1, 3, &cfg()).unwrap();
        let mut n = step(&s, &Action::ZERO, &cfg());
        assert_eq!(n.step_count, 1);
        n.step_count = 0;
        assert_eq!(n, s);
    }

    #[test]
    fn closing_far_from_objects_grasps_nothing() {
        let c = cfg();
        let mut s = reset(&TaskSpec::poke(0), 0, 0, 1, &c).unwrap();
        s.objects[0].pos = [0.9, 0.9];
        s.initial_positions[0] = [0.9, 0.9];
        s.gripper = [0.1, 0.1, 0.05, 0.8];
        for _ in 0..20 {
            s = step(&s, &Action::clipped([0.0, 0.0, 0.0, -1.0], c.max_delta), &c);
        }
        assert!(s.gripper[3] < c.close_threshold);
        assert_eq!(s.held_object, None);
    }

    #[test]
    fn action_is_clipped() {
        let a = Action::clipped([1.0, -1.0, 0.01, f32::NAN], 0.05);
        assert_eq!(a.as_array(), [0.05, -0.05, 0.01, 0.0]);
    }

    #[test]
    fn task_labels_round_trip() {
        for t in [TaskSpec::poke(4), TaskSpec::pick_place(2, 1)] {
            assert_eq!(TaskSpec::parse(&t.label()).unwrap(), t);
        }
        assert!(TaskSpec::parse("wave:1").is_err());
        assert!(TaskSpec::new(TaskKind::Poke, 1, Some(0)).is_err());
        assert!(TaskSpec::new(TaskKind::PickPlace, 1, None).is_err());
    }

    #[test]
    fn initial_score_is_zero_and_held_target_scores_half() {
        let c = cfg();
        let task = TaskSpec::pick_place(2, 1);
        let mut s = reset(&task, 1, 1, 9, &c).unwrap();
        assert_eq!(success(&s, &task, &c), 0.0);
        let t = s.object_of_class(2).unwrap();
        s.gripper = [s.objects[t].pos[0], s.objects[t].pos[1], 0.1, 0.32];
        s = step(&s, &Action::clipped([0.0, 0.0, 0.0, -0.05], c.max_delta), &c);
        assert_eq!(s.held_object, Some(t));
        assert_eq!(success(&s, &task, &c), 0.5);
    }
}
