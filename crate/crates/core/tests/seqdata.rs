use ictrace_core::seqdata::{
    build_sequence, chunk_labels, load_episodes, read_episodes, save_episodes, split_tasks, write_episodes, EpisodeMeta, Role, Step, Trajectory, TOKENS_PER_STEP,
};
use ictrace_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn trajectory(label: &str, len: usize, res: usize, traces: bool, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = move || rand::Rng::random::<f32>(&mut rng);
    Trajectory {
        task_label: label.to_string(),
        meta: EpisodeMeta {
            seed,
            n_distractor_objects: 2,
            n_distractor_receptacles: 1,
        },
        steps: (0..len)
            .map(|_| Step {
                third: (0..res * res * 3).map(|_| r()).collect(),
                wrist: (0..res * res * 3 / 4).map(|_| r()).collect(),
                proprio: std::array::from_fn(|_| r()),
                trace: traces.then(|| std::array::from_fn(|_| r())),
                action: std::array::from_fn(|_| r() - 0.5),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episode_files_round_trip_bit_exactly(lens in prop::collection::vec(1usize..6, 0..4), traces in any::<bool>(), seed in any::<u64>()) {
        let data: Vec<Trajectory> = lens.iter().enumerate().map(|(i, &n)| trajectory(&format!("poke:{i}"), n, 8, traces, seed ^ i as u64)).collect();
        let bytes = write_episodes(&data).unwrap();
        let back = read_episodes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            prop_assert_eq!(&a.task_label, &b.task_label);
            prop_assert_eq!(a.meta, b.meta);
            for (x, y) in a.steps.iter().zip(&b.steps) {
                let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&x.third), bits(&y.third));
                prop_assert_eq!(bits(&x.wrist), bits(&y.wrist));
                prop_assert_eq!(bits(&x.proprio), bits(&y.proprio));
                prop_assert_eq!(bits(&x.action), bits(&y.action));
                prop_assert_eq!(x.trace.map(|t| bits(&t)), y.trace.map(|t| bits(&t)));
            }
        }
    }

    #[test]
    fn sequences_score_only_the_target(lens in prop::collection::vec(2usize..9, 2..6), n_prompt in 1usize..3, seed in any::<u64>(), horizon in 1usize..6) {
        prop_assume!(lens.len() > n_prompt);
        let data: Vec<Trajectory> = lens.iter().map(|&n| trajectory("poke:1", n, 8, true, seed)).collect();
        let refs: Vec<&Trajectory> = data.iter().collect();
        let seq = build_sequence(&refs, n_prompt, horizon, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let prompt_tokens = seq.prompt_steps() * TOKENS_PER_STEP;
        prop_assert_eq!(seq.loss_mask.len(), seq.total_steps() * TOKENS_PER_STEP);
        prop_assert!(seq.loss_mask[..prompt_tokens].iter().all(|m| !m));
        for (pos, &m) in seq.loss_mask.iter().enumerate().skip(prompt_tokens) {
            prop_assert_eq!(m, Role::of_position(pos) != Role::Action);
        }
        prop_assert_eq!(seq.reasoning_input_mask.len(), seq.target_steps());
        prop_assert_eq!(seq.chunk_labels.len(), seq.target_steps());
        prop_assert!(seq.chunk_labels.iter().all(|c| c.actions.len() == horizon && c.valid[0]));
        prop_assert_eq!(seq.total_steps(), lens.iter().sum::<usize>());
    }

    #[test]
    fn splits_are_disjoint_and_complete(n in 2usize..30, frac in 0.05f32..0.95, seed in any::<u64>()) {
        let labels: Vec<String> = (0..n).map(|i| format!("poke:{i}")).collect();
        match split_tasks(&labels, frac, seed) {
            Ok(s) => {
                prop_assert!(s.train_tasks.is_disjoint(&s.test_tasks));
                prop_assert_eq!(s.train_tasks.len() + s.test_tasks.len(), n);
                prop_assert!(!s.train_tasks.is_empty() && !s.test_tasks.is_empty());
                prop_assert_eq!(s, split_tasks(&labels, frac, seed).unwrap());
            }
            Err(_) => {
                let k = (frac as f64 * n as f64).round() as usize;
                prop_assert!(k == 0 || k == n);
            }
        }
    }

    #[test]
    fn chunk_padding_repeats_the_final_action(len in 1usize..20, t_frac in 0.0f64..1.0, horizon in 1usize..20) {
        let actions: Vec<[f32; 4]> = (0..len).map(|i| [i as f32; 4]).collect();
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let (labels, valid) = chunk_labels(&actions, t, horizon);
        for j in 0..horizon {
            let i = (t + j).min(len - 1);
            prop_assert_eq!(labels[j], actions[i]);
            prop_assert_eq!(valid[j], t + j < len);
        }
    }
}

#[test]
fn seven_three_split_of_ten_tasks() {
    let labels: Vec<String> = (0..10).map(|i| format!("poke:{i}")).collect();
    let s = split_tasks(&labels, 0.3, 0).unwrap();
    assert_eq!((s.train_tasks.len(), s.test_tasks.len()), (7, 3));
    let two = split_tasks(&labels[..2], 0.5, 0).unwrap();
    assert_eq!((two.train_tasks.len(), two.test_tasks.len()), (1, 1));
    assert!(split_tasks(&labels[..2], 0.1, 0).is_err());
}

#[test]
fn file_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.bin");
    let data = vec![trajectory("poke:0", 3, 8, true, 1), trajectory("poke:0", 2, 8, true, 2)];
    save_episodes(&path, &data).unwrap();
    assert_eq!(load_episodes(&path).unwrap(), data);
    let bytes = std::fs::read(&path).unwrap();

    let truncated = &bytes[..bytes.len() - 5];
    assert!(matches!(read_episodes(truncated, &path), Err(Error::Truncated { .. })));

    let text = String::from_utf8_lossy(&bytes[..40]).to_string();
    let mut versioned = bytes.clone();
    let header_end = text.find('\n').unwrap();
    versioned.splice(..header_end, "ICTRACE-EPISODES 2".bytes());
    assert!(matches!(read_episodes(&versioned, &path), Err(Error::Version { .. })));

    let text = String::from_utf8_lossy(&bytes).to_string();
    let at = text.find("\"steps\":3").unwrap();
    let mut reshaped = bytes.clone();
    reshaped[at + 8] = b'4';
    assert!(matches!(read_episodes(&reshaped, &path), Err(Error::ShapeInconsistency { .. })));

    let empty = dir.path().join("empty.bin");
    save_episodes(&empty, &[]).unwrap();
    assert!(load_episodes(&empty).unwrap().is_empty());
    assert!(load_episodes(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn two_episode_sequence_counts() {
    let a = trajectory("pick_place:1:0", 5, 8, true, 3);
    let b = trajectory("pick_place:1:0", 7, 8, true, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = build_sequence(&[&a, &b], 1, 4, &mut rng).unwrap();
    assert_eq!(seq.total_steps(), 12);
    let scored = seq.loss_mask.iter().filter(|m| **m).count();
    assert_eq!(scored, 2 * seq.target_steps());
    assert!(build_sequence(&[&a], 1, 4, &mut rng).is_err());
    let c = trajectory("poke:1", 4, 8, true, 5);
    assert!(build_sequence(&[&a, &c], 1, 4, &mut rng).is_err());
}
