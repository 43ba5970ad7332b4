//! Expert demonstration datasets.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use ictrace_core::seqdata::{load_episodes, record_expert_episode, save_episodes, EpisodeMeta, Trajectory};
use ictrace_core::simworld::success;
use ictrace_core::traces::augment_dataset;
use ictrace_core::{TaskSpec, WorldConfig};

use crate::catalogue::{derive_seed, level_distractors, Split};
use crate::config::HarnessConfig;

pub const TRAIN_FILE: &str = "train.eps";
pub const TEST_FILE: &str = "test.eps";
pub const SPLIT_FILE: &str = "split.txt";

/// Scene seeds tried per requested demonstration before giving up.
const MAX_ATTEMPTS: u64 = 20;

/// Records one successful, trace-augmented expert episode, trying successive
/// seeds of the stream `seed_of(attempt)` until the expert succeeds.
pub fn record_demo(task: &TaskSpec, distractors: (usize, usize), noise_sigma: f32, world: &WorldConfig, seed_of: impl Fn(u64) -> u64) -> Result<Trajectory> {
    for attempt in 0..MAX_ATTEMPTS {
        let meta = EpisodeMeta {
            seed: seed_of(attempt),
            n_distractor_objects: distractors.0,
            n_distractor_receptacles: distractors.1,
        };
        let (mut traj, end) = match record_expert_episode(task, meta, noise_sigma, world) {
            Ok(r) => r,
            Err(ictrace_core::Error::Placement { .. }) => continue,
            Err(e) => return Err(anyhow!(e).context(format!("task {task}, scene seed {}", meta.seed))),
        };
        if success(&end, task, world) < 1.0 {
            continue;
        }
        augment_dataset(std::slice::from_mut(&mut traj), &world.third_camera())?;
        return Ok(traj);
    }
    Err(anyhow!("task {task}: no successful expert episode after {MAX_ATTEMPTS} scene seeds"))
}

/// `demos_per_task` episodes per task, difficulty cycling through
/// `0..=max_level`.
pub fn generate_tasks(cfg: &HarnessConfig, tasks: &[TaskSpec]) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(tasks.len() * cfg.demos_per_task);
    for task in tasks {
        let task_id = cfg.catalogue_tasks().iter().position(|t| t == task).unwrap_or(usize::MAX) as u64;
        for i in 0..cfg.demos_per_task {
            let level = i % (cfg.max_level + 1);
            let seed_of = |attempt| derive_seed(cfg.data_seed, 1, task_id, (i as u64) * MAX_ATTEMPTS + attempt);
            out.push(record_demo(task, level_distractors(task, level), cfg.noise_sigma, &cfg.world, seed_of)?);
        }
    }
    Ok(out)
}

pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub split: PathBuf,
}

impl DataPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            train: dir.join(TRAIN_FILE),
            test: dir.join(TEST_FILE),
            split: dir.join(SPLIT_FILE),
        }
    }
}

/// Generates and writes both splits, the split file and the resolved config.
pub fn cmd_gen_data(cfg: &HarnessConfig) -> Result<DataPaths> {
    let split = Split::from_config(cfg)?;
    let paths = DataPaths::new(&cfg.data_dir);
    std::fs::create_dir_all(&cfg.data_dir).with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    save_episodes(&paths.train, &generate_tasks(cfg, &split.train)?)?;
    save_episodes(&paths.test, &generate_tasks(cfg, &split.test)?)?;
    std::fs::write(&paths.split, split.to_text())?;
    cfg.write_resolved(&cfg.data_dir)?;
    Ok(paths)
}

pub fn load_training_set(cfg: &HarnessConfig) -> Result<Vec<Trajectory>> {
    let paths = DataPaths::new(&cfg.data_dir);
    let split = Split::load(&paths.split)?;
    let data = load_episodes(&paths.train).with_context(|| format!("loading {}", paths.train.display()))?;
    if let Some(t) = data.iter().find(|t| split.test.iter().any(|s| s.label() == t.task_label)) {
        return Err(anyhow!("training file contains held-out task {}", t.task_label));
    }
    Ok(data)
}
