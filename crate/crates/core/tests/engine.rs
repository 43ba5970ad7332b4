use ictrace_core::engine::{
    full_forward, kv_decode, rollout, smoothed_endpoints, temporal_ensemble, train, EnsembleBuffer, ExpertReplay, KvCache, ModelPolicy, RolloutOptions, Scene, TrainConfig,
};
use ictrace_core::model::{ModelConfig, PolicyModel, TokenInput, Variant};
use ictrace_core::numerics::AdamWConfig;
use ictrace_core::seqdata::{record_expert_episode, EpisodeMeta, Trajectory};
use ictrace_core::simworld::{expert_episode_len, reset, success, TaskSpec, WorldConfig};
use ictrace_core::traces::augment_dataset;
use ictrace_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers,
        n_heads: 4,
        ffn_hidden: 2 * d_model,
        ..ModelConfig::default()
    }
}

struct Obs {
    third: Vec<Vec<f32>>,
    wrist: Vec<Vec<f32>>,
}

fn random_obs(c: &ModelConfig, steps: usize, rng: &mut impl Rng) -> Obs {
    let img = |res: usize, rng: &mut dyn rand::RngCore| (0..res * res * 3).map(|_| rng.random::<f32>()).collect::<Vec<f32>>();
    Obs {
        third: (0..steps).map(|_| img(c.third_res, rng)).collect(),
        wrist: (0..steps).map(|_| img(c.wrist_res, rng)).collect(),
    }
}

fn tokens<'a>(obs: &'a Obs, len: usize, rng: &mut impl Rng) -> Vec<TokenInput<'a>> {
    (0..len)
        .map(|i| match i % 3 {
            0 => TokenInput::State {
                third: &obs.third[i / 3],
                wrist: &obs.wrist[i / 3],
                proprio: std::array::from_fn(|_| rng.random()),
            },
            1 => TokenInput::Reasoning(rng.random::<bool>().then(|| std::array::from_fn(|_| rng.random()))),
            _ => TokenInput::Action(std::array::from_fn(|_| rng.random_range(-0.05..0.05))),
        })
        .collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn dataset(tasks: &[TaskSpec], per_task: u64) -> Vec<Trajectory> {
    let cfg = WorldConfig::default();
    let mut out = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        for i in 0..per_task {
            let meta = EpisodeMeta {
                seed: 1000 * k as u64 + i,
                n_distractor_objects: i as usize % 3,
                n_distractor_receptacles: 0,
            };
            out.push(record_expert_episode(task, meta, 0.005, &cfg).unwrap().0);
        }
    }
    augment_dataset(&mut out, &cfg.third_camera()).unwrap();
    out
}

#[test]
fn token_by_token_decode_matches_full_forward() {
    let c = config(32, 2);
    let model = PolicyModel::new(c.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let obs = random_obs(&c, 20, &mut rng);
        let toks = tokens(&obs, 60, &mut rng);
        let full = full_forward(&model, &toks).unwrap();
        let mut cache = KvCache::new(&c);
        let mut hidden = Vec::new();
        let mut traces = Vec::new();
        let mut chunks = Vec::new();
        for (i, t) in toks.iter().enumerate() {
            let out = kv_decode(&model, &mut cache, std::slice::from_ref(t)).unwrap();
            assert_eq!(cache.len(), i + 1);
            hidden.extend(out.hidden);
            traces.extend(out.traces.into_iter().flatten());
            chunks.extend(out.chunks.into_iter().flatten());
        }
        assert!(max_diff(&hidden, &full.hidden) <= 1e-5);
        assert!(max_diff(&traces, &full.traces.concat()) <= 1e-5);
        assert!(max_diff(&chunks, &full.chunks.concat()) <= 1e-5);
    }
}

#[test]
fn decode_in_uneven_pieces_matches_full_forward() {
    let c = config(32, 2);
    let model = PolicyModel::new(c.clone(), 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let obs = random_obs(&c, 30, &mut rng);
    let toks = tokens(&obs, 90, &mut rng);
    let full = full_forward(&model, &toks).unwrap();
    let mut cache = KvCache::new(&c);
    let mut hidden = Vec::new();
    let mut start = 0;
    for len in [1, 7, 30, 2, 50] {
        let out = kv_decode(&model, &mut cache, &toks[start..start + len]).unwrap();
        hidden.extend(out.hidden);
        start += len;
    }
    assert_eq!(cache.len(), 90);
    assert!(max_diff(&hidden, &full.hidden) <= 1e-5);
}

#[test]
fn empty_cache_decode_is_the_full_forward() {
    let c = config(16, 1);
    let model = PolicyModel::new(c.clone(), 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let obs = random_obs(&c, 4, &mut rng);
    let toks = tokens(&obs, 12, &mut rng);
    let mut cache = KvCache::new(&c);
    assert_eq!(kv_decode(&model, &mut cache, &toks).unwrap(), full_forward(&model, &toks).unwrap());
}

#[test]
fn overflow_leaves_cache_untouched() {
    let c = ModelConfig {
        max_context: 9,
        ..config(16, 1)
    };
    let model = PolicyModel::new(c.clone(), 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let obs = random_obs(&c, 4, &mut rng);
    let toks = tokens(&obs, 12, &mut rng);
    let mut cache = KvCache::new(&c);
    kv_decode(&model, &mut cache, &toks[..6]).unwrap();
    let before = cache.clone();
    assert!(matches!(kv_decode(&model, &mut cache, &toks[6..12]), Err(Error::ContextOverflow { needed: 12, max: 9 })));
    assert_eq!(cache, before);
    // a layout violation also leaves it alone
    assert!(kv_decode(&model, &mut cache, &toks[7..8]).is_err());
    assert_eq!(cache, before);
}

#[test]
fn large_decay_ensemble_follows_the_oldest_chunk() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut b = EnsembleBuffer::new(50.0);
    let mut issued: Vec<Vec<[f32; 4]>> = Vec::new();
    for t in 0..20 {
        let chunk: Vec<[f32; 4]> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        issued.push(chunk.clone());
        b.push(t, chunk);
        let oldest = t.saturating_sub(7);
        let expected = issued[oldest][t - oldest];
        let got = temporal_ensemble(&b, t).unwrap();
        for k in 0..4 {
            assert!((got[k] - expected[k]).abs() < 1e-6);
        }
        assert!(b.len() <= 8);
    }
}

proptest! {
    #[test]
    fn ensemble_is_a_convex_combination(vals in prop::collection::vec(-1.0f32..1.0, 1..8), decay in 0.0f32..5.0) {
        let mut b = EnsembleBuffer::new(decay);
        let n = vals.len();
        for (i, v) in vals.iter().enumerate() {
            b.push(i, vec![[*v; 4]; n]);
        }
        let got = temporal_ensemble(&b, n - 1).unwrap()[0];
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(got >= lo - 1e-6 && got <= hi + 1e-6);
    }
}

#[test]
fn zero_steps_returns_the_initialisation() {
    let c = config(16, 1);
    let cfg = TrainConfig {
        steps: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let state = train(c.clone(), &cfg, &[]).unwrap();
    let fresh = PolicyModel::new(c, 5).unwrap();
    assert_eq!(state.model.to_checkpoint(&[]), fresh.to_checkpoint(&[]));
    assert!(state.history.is_empty());
}

#[test]
fn training_is_seed_deterministic() {
    let data = dataset(&[TaskSpec::poke(0), TaskSpec::poke(1)], 3);
    let c = config(16, 1);
    let cfg = TrainConfig {
        steps: 15,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(c.clone(), &cfg, &data).unwrap();
    let b = train(c.clone(), &cfg, &data).unwrap();
    assert_eq!(a.model.to_checkpoint(&[]), b.model.to_checkpoint(&[]));
    assert_eq!(a.history, b.history);
    assert_eq!(a.optimizer.step_count(), 15);
    let other = train(c, &TrainConfig { seed: 10, ..cfg }, &data).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn short_training_halves_the_loss_on_a_toy_set() {
    let data = dataset(&[TaskSpec::poke(0), TaskSpec::poke(1), TaskSpec::poke(2), TaskSpec::poke(3)], 5);
    assert_eq!(data.len(), 20);
    let c = config(32, 2);
    let cfg = TrainConfig {
        steps: 500,
        seed: 1,
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let state = train(c, &cfg, &data).unwrap();
    let (first, last) = smoothed_endpoints(&state.history, 50).unwrap();
    eprintln!("smoothed loss {first} -> {last}");
    assert!(last < 0.5 * first);
}

#[test]
fn training_needs_a_task_with_two_episodes() {
    let data = dataset(&[TaskSpec::poke(0), TaskSpec::poke(1)], 1);
    let cfg = TrainConfig {
        steps: 1,
        ..TrainConfig::default()
    };
    assert!(train(config(16, 1), &cfg, &data).is_err());
}

#[test]
fn expert_replay_succeeds_through_the_rollout_path() {
    let world = WorldConfig::default();
    for (i, task) in [TaskSpec::poke(2), TaskSpec::pick_place(1, 0), TaskSpec::pick_place(4, 2)].into_iter().enumerate() {
        for seed in 0..10 {
            let scene = Scene {
                task,
                n_distractor_objects: seed as usize % 4,
                n_distractor_receptacles: if i > 0 { 1 } else { 0 },
            };
            let mut policy = ExpertReplay::new(task, world.clone(), 8);
            let opts = RolloutOptions {
                seed,
                ..RolloutOptions::default()
            };
            let out = rollout(&mut policy, &scene, &[], &opts, &world).unwrap();
            assert_eq!(out.score, 1.0, "{task} seed {seed}");
            assert_eq!(out.trace_decodes, out.steps);
        }
    }
}

#[test]
fn trace_decodes_follow_the_interval() {
    let world = WorldConfig::default();
    let c = config(16, 1);
    let model = PolicyModel::new(c, 26).unwrap();
    let task = TaskSpec::poke(1);
    let prompt = dataset(&[task], 1);
    let scene = Scene {
        task,
        n_distractor_objects: 1,
        n_distractor_receptacles: 0,
    };
    for k in [0usize, 1, 3, 8, 16, 32] {
        let opts = RolloutOptions {
            interval: k,
            max_steps: 40,
            seed: 3,
            ..RolloutOptions::default()
        };
        let mut policy = ModelPolicy::new(&model, Variant::OURS);
        let out = rollout(&mut policy, &scene, &[&prompt[0]], &opts, &world).unwrap();
        let expected = if k == 0 { 0 } else { out.steps.div_ceil(k) };
        assert_eq!(out.trace_decodes, expected, "k = {k}");
        assert!(out.traces.iter().all(|(t, tr)| k > 0 && t % k == 0 && tr.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(out.trajectory.len(), out.steps);
    }
}

#[test]
fn rollouts_are_deterministic() {
    let world = WorldConfig::default();
    let model = PolicyModel::new(config(16, 1), 27).unwrap();
    let task = TaskSpec::pick_place(2, 1);
    let prompt = dataset(&[task], 1);
    let scene = Scene {
        task,
        n_distractor_objects: 2,
        n_distractor_receptacles: 1,
    };
    let opts = RolloutOptions {
        max_steps: 30,
        seed: 11,
        ..RolloutOptions::default()
    };
    let run = || {
        let mut policy = ModelPolicy::new(&model, Variant::OURS);
        rollout(&mut policy, &scene, &[&prompt[0]], &opts, &world).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn context_overflow_is_reported_not_raised() {
    let world = WorldConfig::default();
    let c = ModelConfig {
        max_context: 60,
        ..config(16, 1)
    };
    let model = PolicyModel::new(c, 28).unwrap();
    let task = TaskSpec::poke(0);
    let scene = Scene {
        task,
        n_distractor_objects: 0,
        n_distractor_receptacles: 0,
    };
    let opts = RolloutOptions {
        max_steps: 100,
        ..RolloutOptions::default()
    };
    let mut policy = ModelPolicy::new(&model, Variant::ICRT_STYLE);
    let out = rollout(&mut policy, &scene, &[], &opts, &world).unwrap();
    assert!(out.overflow);
    assert_eq!(out.steps, 20);
    assert!(policy.cache().len() <= 60);
}

#[test]
fn trained_model_solves_a_seen_task() {
    let world = WorldConfig::default();
    let task = TaskSpec::poke(2);
    let mut data = Vec::new();
    let mut seed = 0;
    while data.len() < 200 {
        let meta = EpisodeMeta {
            seed,
            n_distractor_objects: 0,
            n_distractor_receptacles: 0,
        };
        seed += 1;
        let (t, s) = record_expert_episode(&task, meta, 0.005, &world).unwrap();
        if success(&s, &task, &world) == 1.0 {
            data.push(t);
        }
    }
    augment_dataset(&mut data, &world.third_camera()).unwrap();
    let tc = TrainConfig {
        steps: 6000,
        final_lr_fraction: 0.05,
        prompt_counts: vec![1],
        optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        ..TrainConfig::default()
    };
    let state = train(config(64, 2), &tc, &data).unwrap();
    let scene = Scene {
        task,
        n_distractor_objects: 0,
        n_distractor_receptacles: 0,
    };
    let mut total = 0.0;
    for r in 0..20u64 {
        let init = reset(&task, 0, 0, 900 + r, &world).unwrap();
        let len = expert_episode_len(&init, &task, &world, 400).unwrap().unwrap();
        let opts = RolloutOptions {
            max_steps: 3 * len,
            seed: 900 + r,
            ..RolloutOptions::default()
        };
        let mut policy = ModelPolicy::new(&state.model, Variant::OURS);
        total += rollout(&mut policy, &scene, &[&data[r as usize]], &opts, &world).unwrap().score;
    }
    let mean = total / 20.0;
    assert!(mean >= 0.9, "seen-task mean score {mean}");
}
