//! Task templates, the held-out split, scene difficulty and prompt setups.

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use ictrace_core::seqdata::split_tasks;
use ictrace_core::{TaskKind, TaskSpec};

use crate::config::HarnessConfig;

/// How the prompt demonstration's scene is populated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptConfig {
    NoDistractor,
    OneDistractor,
    DistractorReceptacle,
}

impl PromptConfig {
    pub const ALL: [PromptConfig; 3] = [PromptConfig::NoDistractor, PromptConfig::OneDistractor, PromptConfig::DistractorReceptacle];

    pub fn name(&self) -> &'static str {
        match self {
            PromptConfig::NoDistractor => "no_distractor",
            PromptConfig::OneDistractor => "one_distractor",
            PromptConfig::DistractorReceptacle => "distractor_receptacle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| anyhow!("unknown prompt config `{s}`"))
    }

    /// `(distractor objects, distractor receptacles)` of the prompt scene.
    pub fn distractors(&self) -> (usize, usize) {
        match self {
            PromptConfig::NoDistractor => (0, 0),
            PromptConfig::OneDistractor => (1, 0),
            PromptConfig::DistractorReceptacle => (0, 1),
        }
    }
}

impl fmt::Display for PromptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How each rollout's prompt demonstration is chosen: always the same one per
/// `(task, prompt config)`, or one of a small pool drawn per rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSelection {
    Fixed,
    Random,
}

impl PromptSelection {
    pub fn name(&self) -> &'static str {
        match self {
            PromptSelection::Fixed => "fixed",
            PromptSelection::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(PromptSelection::Fixed),
            "random" => Ok(PromptSelection::Random),
            _ => bail!("unknown prompt selection `{s}` (expected fixed or random)"),
        }
    }
}

/// Distractor counts of a scene at difficulty `level`: `level` extra objects,
/// and for pick-and-place up to two extra receptacles.
pub fn level_distractors(task: &TaskSpec, level: usize) -> (usize, usize) {
    match task.kind() {
        TaskKind::Poke => (level, 0),
        TaskKind::PickPlace => (level, level.div_ceil(2).min(2)),
    }
}

/// Train-visible and held-out task templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
}

impl Split {
    /// Splits each task kind separately with the configured held-out share.
    pub fn from_config(cfg: &HarnessConfig) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, kind) in [TaskKind::Poke, TaskKind::PickPlace].into_iter().enumerate() {
            let labels: Vec<String> = cfg.catalogue_tasks().iter().filter(|t| t.kind() == kind).map(|t| t.label()).collect();
            match labels.len() {
                0 => continue,
                1 => {
                    train.push(TaskSpec::parse(&labels[0])?);
                    continue;
                }
                _ => {}
            }
            let s = split_tasks(&labels, cfg.test_fraction, cfg.split_seed.wrapping_add(i as u64))?;
            for l in s.train_tasks {
                train.push(TaskSpec::parse(&l)?);
            }
            for l in s.test_tasks {
                test.push(TaskSpec::parse(&l)?);
            }
        }
        train.sort();
        test.sort();
        Ok(Self { train, test })
    }

    pub fn to_text(&self) -> String {
        let line = |v: &[TaskSpec]| v.iter().map(|t| t.label()).collect::<Vec<_>>().join(",");
        format!("train = {}\ntest = {}\n", line(&self.train), line(&self.test))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut train = None;
        let mut test = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("malformed split line `{line}`"))?;
            let tasks = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| TaskSpec::parse(s).map_err(Into::into)).collect::<Result<Vec<_>>>()?;
            match k.trim() {
                "train" => train = Some(tasks),
                "test" => test = Some(tasks),
                other => bail!("unknown split key `{other}`"),
            }
        }
        let split = Self {
            train: train.ok_or_else(|| anyhow!("split has no train line"))?,
            test: test.ok_or_else(|| anyhow!("split has no test line"))?,
        };
        if split.train.iter().any(|t| split.test.contains(t)) {
            bail!("train and test tasks overlap");
        }
        Ok(split)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading split file {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in split file {}", path.display()))
    }
}

/// Stable per-purpose seed streams.
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for v in [a, b] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_five_and_three_per_kind() {
        let split = Split::from_config(&HarnessConfig::default()).unwrap();
        for kind in [TaskKind::Poke, TaskKind::PickPlace] {
            assert_eq!(split.train.iter().filter(|t| t.kind() == kind).count(), 5);
            assert_eq!(split.test.iter().filter(|t| t.kind() == kind).count(), 3);
        }
        assert_eq!(Split::parse(&split.to_text()).unwrap(), split);
    }

    #[test]
    fn overlapping_split_is_rejected() {
        assert!(Split::parse("train = poke:1,poke:2\ntest = poke:2\n").is_err());
        assert!(Split::parse("train = poke:1\n").is_err());
    }

    #[test]
    fn prompt_names_round_trip() {
        for p in PromptConfig::ALL {
            assert_eq!(PromptConfig::parse(p.name()).unwrap(), p);
        }
    }
}
