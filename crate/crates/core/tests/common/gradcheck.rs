//! Autodiff gradients of the full objective against central differences of
//! the f64 reference objective.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ictrace_core::model::{LossBatch, ModelConfig, PolicyModel, TokenInput};
use ictrace_core::numerics::Tape;

use super::oracle;

/// Gradients smaller than this are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

pub struct Report {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// `|f32 loss − f64 reference loss|`.
    pub forward_gap: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

pub fn small_config(d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers,
        n_heads: 2,
        ffn_hidden: d_model * 3 / 2,
        patch_size: 8,
        third_res: 16,
        wrist_res: 8,
        chunk_horizon: 2,
        ..ModelConfig::default()
    }
}

pub struct Inputs {
    pub third: Vec<Vec<f32>>,
    pub wrist: Vec<Vec<f32>>,
    pub proprio: Vec<[f32; 4]>,
    pub actions: Vec<[f32; 4]>,
}

/// Random observations for `steps` steps.
pub fn random_inputs(c: &ModelConfig, steps: usize, rng: &mut impl Rng) -> Inputs {
    let img = |res: usize, rng: &mut dyn rand::RngCore| (0..res * res * 3).map(|_| rng.random::<f32>()).collect::<Vec<_>>();
    Inputs {
        third: (0..steps).map(|_| img(c.third_res, rng)).collect(),
        wrist: (0..steps).map(|_| img(c.wrist_res, rng)).collect(),
        proprio: (0..steps).map(|_| std::array::from_fn(|_| rng.random())).collect(),
        actions: (0..steps).map(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05))).collect(),
    }
}

/// Three steps: a prompt step (unscored) and two target steps with partly
/// masked chunk labels. Labels sit at least 0.3 away from the current
/// predictions so that no `|·|` kink lies within a difference step.
pub fn batch<'a>(model: &PolicyModel, inputs: &'a Inputs, rng: &mut impl Rng) -> LossBatch<'a> {
    let c = &model.config;
    let steps = inputs.third.len();
    let mut tokens = Vec::new();
    for s in 0..steps {
        tokens.push(TokenInput::State {
            third: &inputs.third[s],
            wrist: &inputs.wrist[s],
            proprio: inputs.proprio[s],
        });
        let trace = (s != 1).then(|| std::array::from_fn(|_| rng.random::<f32>()));
        tokens.push(TokenInput::Reasoning(trace));
        tokens.push(TokenInput::Action(inputs.actions[s]));
    }
    let w = c.chunk_width();
    let trace_mask: Vec<bool> = (0..steps).flat_map(|s| std::iter::repeat_n(s > 0, 10)).collect();
    let chunk_mask: Vec<bool> = (0..steps).flat_map(|s| (0..w).map(move |j| s > 0 && (s == 1 || j < w / 2))).collect();
    let (traces, chunks) = oracle::heads(&oracle::params_of(model), c, &tokens);
    let mut away = |v: f64| {
        let off = rng.random_range(0.3..1.0);
        (if rng.random::<bool>() { v + off } else { v - off }) as f32
    };
    let trace_labels = traces.iter().map(|&v| away(v)).collect();
    let chunk_labels = chunks.iter().map(|&v| away(v) / c.action_scale).collect();
    LossBatch {
        tokens,
        trace_labels,
        trace_mask,
        chunk_labels,
        chunk_mask,
    }
}

pub fn run(d_model: usize, n_layers: usize, seed: u64) -> Report {
    let c = small_config(d_model, n_layers);
    let model = PolicyModel::new(c.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random_inputs(&c, 3, &mut rng);
    let batch = batch(&model, &inputs, &mut rng);

    let mut tape = Tape::new();
    let out = model.batch_loss(&mut tape, &batch, false).unwrap();
    let loss32 = tape.data(out.total)[0] as f64;
    tape.backward(out.total).unwrap();
    // A parameter read at several places yields one partial gradient per read.
    let mut grads: std::collections::BTreeMap<usize, (ictrace_core::numerics::ParamId, Vec<f32>)> = Default::default();
    for (id, g) in tape.param_grads().unwrap() {
        let slot = grads.entry(id.index()).or_insert_with(|| (id, vec![0.0; g.len()]));
        slot.1.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
    }

    let mut params = oracle::params_of(&model);
    let forward_gap = (loss32 - oracle::loss(&params, &c, &batch)).abs();
    let mut report = Report {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        forward_gap,
        per_param: Vec::new(),
    };
    for (id, g) in grads.into_values() {
        let name = model.params.name(id).to_string();
        let mut worst = 0.0f64;
        for (i, &a) in g.iter().enumerate() {
            let orig = params[&name][i];
            params.get_mut(&name).unwrap()[i] = orig + STEP;
            let up = oracle::loss(&params, &c, &batch);
            params.get_mut(&name).unwrap()[i] = orig - STEP;
            let down = oracle::loss(&params, &c, &batch);
            params.get_mut(&name).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = a as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}] autodiff {a:e} numeric {numeric:e}");
            }
            worst = worst.max(rel);
            report.checked += 1;
        }
        report.per_param.push((name, worst));
    }
    report
}
