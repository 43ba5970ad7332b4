//! Straight-line f64 re-implementation of the policy forward pass and loss,
//! written from the architecture description rather than from the tape code.
//! Parameters are looked up by name so that single entries can be perturbed.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ictrace_core::model::{LossBatch, ModelConfig, PolicyModel, TokenInput};

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_of(model: &PolicyModel) -> Params {
    model
        .params
        .ids()
        .map(|id| (model.params.name(id).to_string(), model.params.get(id).data().iter().map(|&v| v as f64).collect()))
        .collect()
}

fn linear(x: &[f64], rows: usize, w: &[f64], inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for i in 0..inp {
            let xv = x[r * inp + i];
            for o in 0..out {
                y[r * out + o] += xv * w[i * out + o];
            }
        }
    }
    y
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Two-layer MLP on `[rows, inp]`. With `pos`, row `r` uses positional row
/// `r % n_pos` as a gain on the hidden layer and an offset on the output.
fn mlp(p: &Params, prefix: &str, x: &[f64], rows: usize, inp: usize, d: usize, pos: Option<&[f64]>) -> Vec<f64> {
    let w1 = &p[&format!("{prefix}.w1")];
    let b1 = &p[&format!("{prefix}.b1")];
    let w2 = &p[&format!("{prefix}.w2")];
    let b2 = &p[&format!("{prefix}.b2")];
    let n_pos = pos.map_or(1, |pe| pe.len() / d);
    let mut h = linear(x, rows, w1, inp, d);
    for r in 0..rows {
        for j in 0..d {
            let v = silu(h[r * d + j] + b1[j]);
            h[r * d + j] = match pos {
                Some(pe) => v * pe[(r % n_pos) * d + j],
                None => v,
            };
        }
    }
    let mut y = linear(&h, rows, w2, d, d);
    for r in 0..rows {
        for j in 0..d {
            y[r * d + j] += b2[j];
            if let Some(pe) = pos {
                y[r * d + j] += pe[(r % n_pos) * d + j];
            }
        }
    }
    y
}

/// Patches in row-major patch order, each flattened row-major with RGB
/// innermost.
fn image_patches(img: &[f32], res: usize, patch: usize) -> Vec<f64> {
    let side = res / patch;
    let mut out = Vec::new();
    for py in 0..side {
        for px in 0..side {
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    for ch in 0..3 {
                        out.push(img[(y * res + x) * 3 + ch] as f64);
                    }
                }
            }
        }
    }
    out
}

fn encode_state(p: &Params, c: &ModelConfig, third: &[f32], wrist: &[f32], proprio: [f32; 4]) -> Vec<f64> {
    let d = c.d_model;
    let pd = c.patch_size * c.patch_size * 3;
    let tn = (c.third_res / c.patch_size).pow(2);
    let wn = (c.wrist_res / c.patch_size).pow(2);
    let third_pos = c.patch_pos_emb.then(|| p["third.pos"].as_slice());
    let wrist_pos = c.patch_pos_emb.then(|| p["wrist.pos"].as_slice());
    let mut items = mlp(p, "third", &image_patches(third, c.third_res, c.patch_size), tn, pd, d, third_pos);
    items.extend(mlp(p, "wrist", &image_patches(wrist, c.wrist_res, c.patch_size), wn, pd, d, wrist_pos));
    let pr: Vec<f64> = proprio.iter().map(|&v| v as f64).collect();
    items.extend(mlp(p, "proprio", &pr, 1, 4, d, None));
    let n = tn + wn + 1;
    let q = &p["pool.query"];
    let scores: Vec<f64> = (0..n).map(|i| (0..d).map(|j| items[i * d + j] * q[j]).sum::<f64>() / (d as f64).sqrt()).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            pooled[j] += e[i] / z * items[i * d + j];
        }
    }
    let mut out = linear(&pooled, 1, &p["pool.w"], d, d);
    out.iter_mut().zip(&p["pool.b"]).for_each(|(o, b)| *o += b);
    out
}

fn embed(p: &Params, c: &ModelConfig, tok: &TokenInput) -> Vec<f64> {
    let d = c.d_model;
    match *tok {
        TokenInput::State { third, wrist, proprio } => encode_state(p, c, third, wrist, proprio),
        TokenInput::Reasoning(t) => {
            let x: Vec<f64> = t.unwrap_or([0.0; 10]).iter().map(|&v| v as f64).collect();
            mlp(p, "reasoning", &x, 1, 10, d, None)
        }
        TokenInput::Action(a) => {
            let x: Vec<f64> = a.iter().map(|&v| v as f64 * c.action_scale as f64).collect();
            mlp(p, "action", &x, 1, 4, d, None)
        }
    }
}

fn rms_norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(g).map(|(v, gi)| v * r * gi));
    }
    out
}

/// Rotates consecutive pairs `(2i, 2i+1)` of each head by `pos·base^(−2i/hd)`.
fn rope(x: &mut [f64], d: usize, n_heads: usize, base: f64) {
    let hd = d / n_heads;
    for (pos, row) in x.chunks_mut(d).enumerate() {
        for h in 0..n_heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                let (s, cs) = theta.sin_cos();
                let j = h * hd + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * cs - b * s;
                row[j + 1] = a * s + b * cs;
            }
        }
    }
}

fn causal_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, n_heads: usize) -> Vec<f64> {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for h in 0..n_heads {
        for i in 0..n {
            let s: Vec<f64> = (0..=i).map(|j| (0..hd).map(|e| q[i * d + h * hd + e] * k[j * d + h * hd + e]).sum::<f64>() * scale).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for t in 0..hd {
                    out[i * d + h * hd + t] += ej / z * v[j * d + h * hd + t];
                }
            }
        }
    }
    out
}

/// Final-norm hidden states `[n, d]` for tokens starting at position 0.
pub fn hidden(p: &Params, c: &ModelConfig, tokens: &[TokenInput]) -> Vec<f64> {
    let d = c.d_model;
    let n = tokens.len();
    let eps = c.norm_eps as f64;
    let mut x: Vec<f64> = tokens.iter().flat_map(|t| embed(p, c, t)).collect();
    for l in 0..c.n_layers {
        let w = |s: &str| &p[&format!("blocks.{l}.{s}")];
        let xn = rms_norm(&x, w("attn_norm"), eps);
        let mut q = linear(&xn, n, w("wq"), d, d);
        let mut k = linear(&xn, n, w("wk"), d, d);
        let v = linear(&xn, n, w("wv"), d, d);
        rope(&mut q, d, c.n_heads, c.rope_base as f64);
        rope(&mut k, d, c.n_heads, c.rope_base as f64);
        let a = causal_attention(&q, &k, &v, n, d, c.n_heads);
        let a = linear(&a, n, w("wo"), d, d);
        x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
        let hn = rms_norm(&x, w("ffn_norm"), eps);
        let f = c.ffn_hidden;
        let gate = linear(&hn, n, w("w_gate"), d, f);
        let up = linear(&hn, n, w("w_up"), d, f);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = linear(&act, n, w("w_down"), f, d);
        x.iter_mut().zip(&down).for_each(|(xi, di)| *xi += di);
    }
    rms_norm(&x, &p["final_norm"], eps)
}

/// `(trace predictions [S, 10], chunk predictions [S, H·4])`.
pub fn heads(p: &Params, c: &ModelConfig, tokens: &[TokenInput]) -> (Vec<f64>, Vec<f64>) {
    let d = c.d_model;
    let h = hidden(p, c, tokens);
    let rows = |r: usize| -> Vec<f64> { (0..tokens.len()).filter(|i| i % 3 == r).flat_map(|i| h[i * d..(i + 1) * d].to_vec()).collect() };
    let head = |x: Vec<f64>, w: &str, b: &str, out: usize| {
        let n = x.len() / d;
        let mut y = linear(&x, n, &p[w], d, out);
        for r in 0..n {
            for o in 0..out {
                y[r * out + o] += p[b][o];
            }
        }
        y
    };
    (
        head(rows(0), "reason_head.w", "reason_head.b", 10),
        head(rows(1), "chunk_head.w", "chunk_head.b", c.chunk_horizon * 4),
    )
}

fn masked_l1(pred: &[f64], label: impl Iterator<Item = f64>, mask: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, l), m) in pred.iter().zip(label).zip(mask) {
        if *m {
            sum += (p - l).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Combined objective for a batch whose tokens start at position 0.
pub fn loss(p: &Params, c: &ModelConfig, batch: &LossBatch) -> f64 {
    let (traces, chunks) = heads(p, c, &batch.tokens);
    let scale = c.action_scale as f64;
    let action = masked_l1(&chunks, batch.chunk_labels.iter().map(|&v| v as f64 * scale), &batch.chunk_mask).expect("scored chunk element");
    let reasoning = masked_l1(&traces, batch.trace_labels.iter().map(|&v| v as f64), &batch.trace_mask).unwrap_or(0.0);
    action + c.reasoning_weight as f64 * reasoning
}
