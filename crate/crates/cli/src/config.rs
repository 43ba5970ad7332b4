//! Flat `key = value` harness configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Lists are comma separated. Every key has a default, so an empty
//! file is a valid configuration; [`HarnessConfig::to_text`] writes the fully
//! resolved form back out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use ictrace_core::engine::TrainConfig;
use ictrace_core::numerics::AdamWConfig;
use ictrace_core::{ModelConfig, TaskSpec, Variant, WorldConfig};

use crate::catalogue::{PromptConfig, PromptSelection};

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub world: WorldConfig,
    /// Standard deviation of the expert's action noise while recording demos.
    pub noise_sigma: f32,
    pub demos_per_task: usize,
    /// Scenes are drawn with `0..=max_level` distractor objects.
    pub max_level: usize,
    pub data_seed: u64,
    pub poke_classes: Vec<usize>,
    pub pick_place: Vec<(usize, usize)>,
    /// Held-out share of each task kind's templates.
    pub test_fraction: f32,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train_steps: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub final_lr_fraction: f32,
    pub prompt_counts: Vec<usize>,
    pub log_every: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub rollouts: usize,
    pub prompt_configs: Vec<PromptConfig>,
    pub prompt_selection: PromptSelection,
    pub interval: usize,
    pub intervals: Vec<usize>,
    /// Rollout budget as a multiple of the expert's episode length.
    pub budget_factor: usize,
    pub ensemble_decay: f32,
    pub eval_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            noise_sigma: 0.005,
            demos_per_task: 50,
            max_level: 4,
            data_seed: 0,
            poke_classes: (0..8).collect(),
            pick_place: (0..8).map(|c| (c, c % 3)).collect(),
            test_fraction: 0.375,
            split_seed: 0,
            model: ModelConfig::default(),
            train_steps: 20_000,
            lr: 3e-4,
            warmup_steps: 100,
            final_lr_fraction: 1.0,
            prompt_counts: vec![1, 2, 3],
            log_every: 50,
            seeds: vec![0, 1, 2],
            variants: vec![Variant::OURS, Variant::ICRT_STYLE],
            rollouts: 10,
            prompt_configs: PromptConfig::ALL.to_vec(),
            prompt_selection: PromptSelection::Fixed,
            interval: 1,
            intervals: vec![1, 8, 16, 32, 0],
            budget_factor: 3,
            ensemble_decay: 0.1,
            eval_seed: 1000,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("expected a number, got `{v}`"))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("expected true or false, got `{v}`"),
    }
}

fn pair(v: &str) -> Result<(usize, usize)> {
    let (o, r) = v.split_once("->").ok_or_else(|| anyhow!("expected OBJECT->RECEPTACLE, got `{v}`"))?;
    Ok((num(o.trim())?, num(r.trim())?))
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                bail!("line {}: `{k}` already set on line {prev}", i + 1);
            }
            cfg.set(k, v).with_context(|| format!("line {}: `{k}`", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.world;
        let m = &mut self.model;
        match key {
            "env.third_res" => w.third_res = num(v)?,
            "env.wrist_res" => w.wrist_res = num(v)?,
            "env.wrist_window" => w.wrist_window = num(v)?,
            "env.max_delta" => w.max_delta = num(v)?,
            "env.grasp_radius" => w.grasp_radius = num(v)?,
            "env.z_grasp" => w.z_grasp = num(v)?,
            "env.close_threshold" => w.close_threshold = num(v)?,
            "env.open_threshold" => w.open_threshold = num(v)?,
            "env.poke_displacement" => w.poke_displacement = num(v)?,
            "data.noise_sigma" => self.noise_sigma = num(v)?,
            "data.demos_per_task" => self.demos_per_task = num(v)?,
            "data.max_level" => self.max_level = num(v)?,
            "data.seed" => self.data_seed = num(v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "tasks.poke" => self.poke_classes = list(v, num)?,
            "tasks.pick_place" => self.pick_place = list(v, pair)?,
            "split.test_fraction" => self.test_fraction = num(v)?,
            "split.seed" => self.split_seed = num(v)?,
            "model.d_model" => m.d_model = num(v)?,
            "model.n_layers" => m.n_layers = num(v)?,
            "model.n_heads" => m.n_heads = num(v)?,
            "model.ffn_hidden" => m.ffn_hidden = num(v)?,
            "model.patch_size" => m.patch_size = num(v)?,
            "model.max_context" => m.max_context = num(v)?,
            "model.chunk_horizon" => m.chunk_horizon = num(v)?,
            "model.reasoning_weight" => m.reasoning_weight = num(v)?,
            "model.action_scale" => m.action_scale = num(v)?,
            "model.patch_pos_emb" => m.patch_pos_emb = flag(v)?,
            "train.steps" => self.train_steps = num(v)?,
            "train.lr" => self.lr = num(v)?,
            "train.warmup_steps" => self.warmup_steps = num(v)?,
            "train.final_lr_fraction" => self.final_lr_fraction = num(v)?,
            "train.prompt_counts" => self.prompt_counts = list(v, num)?,
            "train.log_every" => self.log_every = num(v)?,
            "train.seeds" => self.seeds = list(v, num)?,
            "train.variants" => self.variants = list(v, |s| Variant::parse(s).map_err(Into::into))?,
            "eval.rollouts" => self.rollouts = num(v)?,
            "eval.prompt_configs" => self.prompt_configs = list(v, PromptConfig::parse)?,
            "eval.prompt_selection" => self.prompt_selection = PromptSelection::parse(v)?,
            "eval.interval" => self.interval = num(v)?,
            "eval.intervals" => self.intervals = list(v, num)?,
            "eval.budget_factor" => self.budget_factor = num(v)?,
            "eval.ensemble_decay" => self.ensemble_decay = num(v)?,
            "eval.seed" => self.eval_seed = num(v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 || (m.d_model / m.n_heads) % 2 != 0 {
            bail!("model.d_model ({}) must split into model.n_heads ({}) heads of even width", m.d_model, m.n_heads);
        }
        if m.reasoning_weight < 0.0 {
            bail!("model.reasoning_weight must be non-negative");
        }
        if self.world.third_res % m.patch_size != 0 || self.world.wrist_res % m.patch_size != 0 {
            bail!("image resolutions must be multiples of model.patch_size");
        }
        if self.demos_per_task < 2 {
            bail!("data.demos_per_task must be at least 2");
        }
        if self.max_level + 1 > self.world.n_object_classes {
            bail!("data.max_level {} needs more object classes than the palette has", self.max_level);
        }
        if self.poke_classes.is_empty() && self.pick_place.is_empty() {
            bail!("the task catalogue is empty");
        }
        for t in self.catalogue_tasks() {
            if t.object_class() >= self.world.n_object_classes || t.receptacle_class().is_some_and(|r| r >= self.world.n_receptacle_classes) {
                bail!("task {t} uses a class outside the palette");
            }
        }
        if self.prompt_counts.is_empty() || self.prompt_counts.contains(&0) {
            bail!("train.prompt_counts must be a nonempty list of positive counts");
        }
        if self.seeds.is_empty() || self.variants.is_empty() || self.prompt_configs.is_empty() {
            bail!("train.seeds, train.variants and eval.prompt_configs must be nonempty");
        }
        if self.rollouts == 0 || self.budget_factor == 0 || self.log_every == 0 {
            bail!("eval.rollouts, eval.budget_factor and train.log_every must be positive");
        }
        Ok(())
    }

    /// Every task template, poke first, in configuration order.
    pub fn catalogue_tasks(&self) -> Vec<TaskSpec> {
        let mut out: Vec<TaskSpec> = self.poke_classes.iter().map(|&c| TaskSpec::poke(c)).collect();
        out.extend(self.pick_place.iter().map(|&(o, r)| TaskSpec::pick_place(o, r)));
        out
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            seed,
            variant,
            optimizer: AdamWConfig { lr: self.lr, ..AdamWConfig::default() },
            warmup_steps: self.warmup_steps,
            final_lr_fraction: self.final_lr_fraction,
            prompt_counts: self.prompt_counts.clone(),
        }
    }

    /// Model hyperparameters with image resolutions taken from the world.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            third_res: self.world.third_res,
            wrist_res: self.world.wrist_res,
            ..self.model.clone()
        }
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let m = &self.model;
        let pairs: Vec<String> = self.pick_place.iter().map(|(o, r)| format!("{o}->{r}")).collect();
        let variants: Vec<&str> = self.variants.iter().map(|v| v.name()).collect();
        let prompts: Vec<&str> = self.prompt_configs.iter().map(|p| p.name()).collect();
        let entries: [(&str, String); 45] = [
            ("env.third_res", w.third_res.to_string()),
            ("env.wrist_res", w.wrist_res.to_string()),
            ("env.wrist_window", w.wrist_window.to_string()),
            ("env.max_delta", w.max_delta.to_string()),
            ("env.grasp_radius", w.grasp_radius.to_string()),
            ("env.z_grasp", w.z_grasp.to_string()),
            ("env.close_threshold", w.close_threshold.to_string()),
            ("env.open_threshold", w.open_threshold.to_string()),
            ("env.poke_displacement", w.poke_displacement.to_string()),
            ("data.noise_sigma", self.noise_sigma.to_string()),
            ("data.demos_per_task", self.demos_per_task.to_string()),
            ("data.max_level", self.max_level.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("tasks.poke", join(&self.poke_classes)),
            ("tasks.pick_place", pairs.join(",")),
            ("split.test_fraction", self.test_fraction.to_string()),
            ("split.seed", self.split_seed.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.ffn_hidden", m.ffn_hidden.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.max_context", m.max_context.to_string()),
            ("model.chunk_horizon", m.chunk_horizon.to_string()),
            ("model.reasoning_weight", m.reasoning_weight.to_string()),
            ("model.action_scale", m.action_scale.to_string()),
            ("model.patch_pos_emb", m.patch_pos_emb.to_string()),
            ("train.steps", self.train_steps.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.warmup_steps", self.warmup_steps.to_string()),
            ("train.final_lr_fraction", self.final_lr_fraction.to_string()),
            ("train.prompt_counts", join(&self.prompt_counts)),
            ("train.log_every", self.log_every.to_string()),
            ("train.seeds", join(&self.seeds)),
            ("train.variants", variants.join(",")),
            ("eval.rollouts", self.rollouts.to_string()),
            ("eval.prompt_configs", prompts.join(",")),
            ("eval.prompt_selection", self.prompt_selection.name().to_string()),
            ("eval.interval", self.interval.to_string()),
            ("eval.intervals", join(&self.intervals)),
            ("eval.budget_factor", self.budget_factor.to_string()),
            ("eval.ensemble_decay", self.ensemble_decay.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("out.dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Writes the resolved configuration to `dir/config.txt`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
