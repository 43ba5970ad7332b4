//! Policy network: modality encoders, a causal transformer over interleaved
//! `[state, reasoning, action]` tokens, and the reasoning and chunk heads.

mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seqdata::{Role, TOKENS_PER_STEP};
use crate::traces::TRACE_DIM;

pub use loss::{build_loss_batch, combine_terms, l1_term, LossBatch, LossOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub patch_size: usize,
    pub third_res: usize,
    pub wrist_res: usize,
    pub max_context: usize,
    pub chunk_horizon: usize,
    pub reasoning_weight: f32,
    /// Actions are multiplied by this before encoding and chunk labels are
    /// expressed in the same units.
    pub action_scale: f32,
    pub rope_base: f32,
    pub norm_eps: f32,
    pub patch_pos_emb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 256,
            patch_size: 8,
            third_res: 32,
            wrist_res: 16,
            max_context: 2048,
            chunk_horizon: 8,
            reasoning_weight: 0.3,
            action_scale: 20.0,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            patch_pos_emb: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model > 0
            && self.n_layers > 0
            && self.n_heads > 0
            && self.d_model % self.n_heads == 0
            && self.head_dim() % 2 == 0
            && self.ffn_hidden > 0
            && self.patch_size > 0
            && self.third_res % self.patch_size == 0
            && self.wrist_res % self.patch_size == 0
            && self.third_res >= self.patch_size
            && self.wrist_res >= self.patch_size
            && self.max_context >= TOKENS_PER_STEP
            && self.chunk_horizon > 0
            && self.reasoning_weight >= 0.0
            && self.reasoning_weight.is_finite()
            && self.action_scale > 0.0
            && self.rope_base > 1.0
            && self.norm_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("inconsistent model config {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn third_patches(&self) -> usize {
        (self.third_res / self.patch_size).pow(2)
    }

    pub fn wrist_patches(&self) -> usize {
        (self.wrist_res / self.patch_size).pow(2)
    }

    /// Items pooled into one state token: all patches of both views plus
    /// proprioception.
    pub fn pooled_items(&self) -> usize {
        self.third_patches() + self.wrist_patches() + 1
    }

    pub fn chunk_width(&self) -> usize {
        self.chunk_horizon * 4
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("third_res", self.third_res.to_string()),
            ("wrist_res", self.wrist_res.to_string()),
            ("max_context", self.max_context.to_string()),
            ("chunk_horizon", self.chunk_horizon.to_string()),
            ("reasoning_weight", self.reasoning_weight.to_string()),
            ("action_scale", self.action_scale.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            ("patch_pos_emb", self.patch_pos_emb.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_lookup<'a>(get: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        fn field<T: std::str::FromStr>(get: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<T> {
            let v = get(key).ok_or_else(|| invalid(format!("missing model key `{key}`")))?;
            v.parse().map_err(|_| invalid(format!("bad value `{v}` for model key `{key}`")))
        }
        let get = |k: &str| get(k).map(str::to_string);
        let cfg = Self {
            d_model: field(&get, "d_model")?,
            n_layers: field(&get, "n_layers")?,
            n_heads: field(&get, "n_heads")?,
            ffn_hidden: field(&get, "ffn_hidden")?,
            patch_size: field(&get, "patch_size")?,
            third_res: field(&get, "third_res")?,
            wrist_res: field(&get, "wrist_res")?,
            max_context: field(&get, "max_context")?,
            chunk_horizon: field(&get, "chunk_horizon")?,
            reasoning_weight: field(&get, "reasoning_weight")?,
            action_scale: field(&get, "action_scale")?,
            rope_base: field(&get, "rope_base")?,
            norm_eps: field(&get, "norm_eps")?,
            patch_pos_emb: field(&get, "patch_pos_emb")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which parts of a sequence carry real reasoning traces.
///
/// Turning a flag off substitutes zero-vector traces, so the token layout is
/// the same for every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub prompt_reasoning: bool,
    pub target_reasoning: bool,
}

impl Variant {
    pub const OURS: Variant = Variant {
        prompt_reasoning: true,
        target_reasoning: true,
    };
    pub const TARGET_ONLY: Variant = Variant {
        prompt_reasoning: false,
        target_reasoning: true,
    };
    pub const ICRT_STYLE: Variant = Variant {
        prompt_reasoning: false,
        target_reasoning: false,
    };
    pub const PROMPT_ONLY: Variant = Variant {
        prompt_reasoning: true,
        target_reasoning: false,
    };

    pub fn name(&self) -> &'static str {
        match (self.prompt_reasoning, self.target_reasoning) {
            (true, true) => "ours",
            (false, true) => "to",
            (false, false) => "icrt",
            (true, false) => "prompt_only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ours" => Ok(Self::OURS),
            "to" => Ok(Self::TARGET_ONLY),
            "icrt" => Ok(Self::ICRT_STYLE),
            "prompt_only" => Ok(Self::PROMPT_ONLY),
            _ => Err(invalid(format!("unknown variant `{name}` (expected ours, to, icrt or prompt_only)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One input token.
#[derive(Clone, Copy, Debug)]
pub enum TokenInput<'a> {
    State { third: &'a [f32], wrist: &'a [f32], proprio: [f32; 4] },
    /// `None` stands for a masked trace and encodes the zero vector.
    Reasoning(Option<[f32; TRACE_DIM]>),
    Action([f32; 4]),
}

impl TokenInput<'_> {
    pub fn role(&self) -> Role {
        match self {
            TokenInput::State { .. } => Role::State,
            TokenInput::Reasoning(_) => Role::Reasoning,
            TokenInput::Action(_) => Role::Action,
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    third: Mlp,
    third_pos: ParamId,
    wrist: Mlp,
    wrist_pos: ParamId,
    proprio: Mlp,
    pool_query: ParamId,
    pool_w: ParamId,
    pool_b: ParamId,
    reasoning: Mlp,
    action: Mlp,
    blocks: Vec<Block>,
    final_norm: ParamId,
    reason_head_w: ParamId,
    reason_head_b: ParamId,
    chunk_head_w: ParamId,
    chunk_head_b: ParamId,
}

/// Per-layer keys (after rotation) and values of every decoded position.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    d_model: usize,
    max_len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            d_model: config.d_model,
            max_len: config.max_context,
        }
    }

    pub fn len(&self) -> usize {
        self.keys[0].len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Drops every position from `len` on, in all layers.
    pub fn truncate(&mut self, len: usize) {
        let n = len * self.d_model;
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(|v| v.truncate(n));
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
    }
}

/// Results of a forward pass over a run of tokens.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Final-norm hidden states `[n, d_model]`.
    pub hidden: Var,
    /// Trace predictions `[n_state, 10]` at state-token rows, if any.
    pub reasoning: Option<Var>,
    /// Chunk predictions `[n_reasoning, H·4]` (scaled units) at
    /// reasoning-token rows, if any.
    pub chunks: Option<Var>,
    pub state_rows: Vec<usize>,
    pub reasoning_rows: Vec<usize>,
}

pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn patches(image: &[f32], res: usize, patch: usize, out: &mut Vec<f32>) {
    let per_side = res / patch;
    for py in 0..per_side {
        for px in 0..per_side {
            for r in 0..patch {
                let row = py * patch + r;
                let start = (row * res + px * patch) * 3;
                out.extend_from_slice(&image[start..start + patch * 3]);
            }
        }
    }
}

/// `[side², d]` sine/cosine features of patch-centre coordinates, row-major
/// over the patch grid. Each group of four columns holds `sin`/`cos` of the
/// x and y coordinate at one frequency.
fn sincos_grid(side: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(side * side * d);
    for py in 0..side {
        for px in 0..side {
            let u = (px as f64 + 0.5) / side as f64;
            let v = (py as f64 + 0.5) / side as f64;
            for j in 0..d {
                let freq = std::f64::consts::PI * (j / 4 + 1) as f64;
                let c = if j % 4 < 2 { u } else { v };
                let val = if j % 2 == 0 { (freq * c).sin() } else { (freq * c).cos() };
                out.push((0.5 * val) as f32);
            }
        }
    }
    out
}

impl PolicyModel {
    /// Fresh model; linear weights and encoder biases are uniform in `±1/√fan_in`,
    /// head biases zero, norm gains one, positional embeddings a 2D sine/cosine grid.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let rng = &mut rng;
        let mut mlp = |p: &mut ParamStore, name: &str, input: usize| -> Result<Mlp> {
            Ok(Mlp {
                w1: p.add_linear_weight(&format!("{name}.w1"), input, d, rng)?,
                b1: p.add_uniform(&format!("{name}.b1"), vec![d], 1.0 / (input as f32).sqrt(), false, rng)?,
                w2: p.add_linear_weight(&format!("{name}.w2"), d, d, rng)?,
                b2: p.add_uniform(&format!("{name}.b2"), vec![d], 1.0 / (d as f32).sqrt(), false, rng)?,
            })
        };
        let third = mlp(&mut p, "third", config.patch_dim())?;
        let wrist = mlp(&mut p, "wrist", config.patch_dim())?;
        let proprio = mlp(&mut p, "proprio", 4)?;
        let reasoning = mlp(&mut p, "reasoning", TRACE_DIM)?;
        let action = mlp(&mut p, "action", 4)?;
        let grid = |n: usize| Tensor::new(vec![n, d], sincos_grid((n as f64).sqrt().round() as usize, d));
        let third_pos = p.add("third.pos", grid(config.third_patches())?, false)?;
        let wrist_pos = p.add("wrist.pos", grid(config.wrist_patches())?, false)?;
        let pool_query = p.add_uniform("pool.query", vec![d, 1], 1.0 / (d as f32).sqrt(), false, rng)?;
        let pool_w = p.add_linear_weight("pool.w", d, d, rng)?;
        let pool_b = p.add_uniform("pool.b", vec![d], 1.0 / (d as f32).sqrt(), false, rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(Block {
                attn_norm: p.add_const(&n("attn_norm"), vec![d], 1.0)?,
                wq: p.add_linear_weight(&n("wq"), d, d, rng)?,
                wk: p.add_linear_weight(&n("wk"), d, d, rng)?,
                wv: p.add_linear_weight(&n("wv"), d, d, rng)?,
                wo: p.add_linear_weight(&n("wo"), d, d, rng)?,
                ffn_norm: p.add_const(&n("ffn_norm"), vec![d], 1.0)?,
                w_gate: p.add_linear_weight(&n("w_gate"), d, config.ffn_hidden, rng)?,
                w_up: p.add_linear_weight(&n("w_up"), d, config.ffn_hidden, rng)?,
                w_down: p.add_linear_weight(&n("w_down"), config.ffn_hidden, d, rng)?,
            });
        }
        let final_norm = p.add_const("final_norm", vec![d], 1.0)?;
        let reason_head_w = p.add_linear_weight("reason_head.w", d, TRACE_DIM, rng)?;
        let reason_head_b = p.add_const("reason_head.b", vec![TRACE_DIM], 0.0)?;
        let chunk_head_w = p.add_linear_weight("chunk_head.w", d, config.chunk_width(), rng)?;
        let chunk_head_b = p.add_const("chunk_head.b", vec![config.chunk_width()], 0.0)?;
        let ids = Ids {
            third,
            third_pos,
            wrist,
            wrist_pos,
            proprio,
            pool_query,
            pool_w,
            pool_b,
            reasoning,
            action,
            blocks,
            final_norm,
            reason_head_w,
            reason_head_b,
            chunk_head_w,
            chunk_head_b,
        };
        Ok(Self { config, params: p, ids })
    }

    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut hyper = self.config.to_pairs();
        hyper.extend(extra.iter().cloned());
        Checkpoint::from_store(hyper, &self.params)
    }

    /// Rebuilds a model from a checkpoint; every parameter must be present
    /// with its configured shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_lookup(|k| ckpt.get(k))?;
        let mut model = Self::new(config, 0)?;
        if ckpt.tensors.len() != model.params.len() {
            return Err(invalid(format!("checkpoint has {} tensors, model expects {}", ckpt.tensors.len(), model.params.len())));
        }
        for (name, t) in &ckpt.tensors {
            let id = model.params.find(name).ok_or_else(|| invalid(format!("unexpected checkpoint tensor `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "from_checkpoint",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "from_checkpoint" });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    fn mlp<'p>(&'p self, tape: &mut Tape<'p>, m: &Mlp, x: Var, pos: Option<(ParamId, usize)>) -> Result<Var> {
        let w1 = tape.param(&self.params, m.w1);
        let b1 = tape.param(&self.params, m.b1);
        let w2 = tape.param(&self.params, m.w2);
        let b2 = tape.param(&self.params, m.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h)?;
        let h = self.pos_op(tape, h, pos, true)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add(h, b2)?;
        self.pos_op(tape, h, pos, false)
    }

    /// Applies the per-patch embedding to `h: [items·per_item, d]`, as a
    /// gain when `gate` and as an offset otherwise.
    fn pos_op<'p>(&'p self, tape: &mut Tape<'p>, h: Var, pos: Option<(ParamId, usize)>, gate: bool) -> Result<Var> {
        let Some((pos_id, per_item)) = pos else { return Ok(h) };
        let rows = tape.value(h).rows();
        let d = self.config.d_model;
        let pe = tape.param(&self.params, pos_id);
        let h3 = tape.reshape(h, [rows / per_item, per_item, d])?;
        let h3 = if gate { tape.mul(h3, pe)? } else { tape.add(h3, pe)? };
        tape.reshape(h3, [rows, d])
    }

    /// Single learned-query softmax attention over `items: [S, n, d]`,
    /// giving `[S, d]` before the output projection.
    pub fn attention_pool<'p>(&'p self, tape: &mut Tape<'p>, items: Var) -> Result<Var> {
        let shape = tape.shape(items).to_vec();
        let (s, n, d) = (shape[0], shape[1], shape[2]);
        let q = tape.param(&self.params, self.ids.pool_query);
        let scores = tape.matmul(items, q)?;
        let scores = tape.reshape(scores, [s, n])?;
        let scores = tape.scale(scores, 1.0 / (d as f32).sqrt())?;
        let probs = tape.softmax(scores)?;
        let probs = tape.reshape(probs, [s, 1, n])?;
        let pooled = tape.matmul(probs, items)?;
        tape.reshape(pooled, [s, d])
    }

    /// State tokens `[S, d]` for `S` observations.
    pub fn encode_states<'p>(&'p self, tape: &mut Tape<'p>, states: &[(&[f32], &[f32], [f32; 4])]) -> Result<Var> {
        let c = &self.config;
        let s = states.len();
        let (tn, wn, pd) = (c.third_patches(), c.wrist_patches(), c.patch_dim());
        let mut third = Vec::with_capacity(s * tn * pd);
        let mut wrist = Vec::with_capacity(s * wn * pd);
        let mut proprio = Vec::with_capacity(s * 4);
        for (t, w, p) in states {
            if t.len() != c.third_res * c.third_res * 3 || w.len() != c.wrist_res * c.wrist_res * 3 {
                return Err(invalid(format!(
                    "image sizes {}/{} do not match resolutions {}/{}",
                    t.len(),
                    w.len(),
                    c.third_res,
                    c.wrist_res
                )));
            }
            patches(t, c.third_res, c.patch_size, &mut third);
            patches(w, c.wrist_res, c.patch_size, &mut wrist);
            proprio.extend_from_slice(p);
        }
        let third = tape.constant([s * tn, pd], third)?;
        let wrist = tape.constant([s * wn, pd], wrist)?;
        let proprio = tape.constant([s, 4], proprio)?;
        let pos = |id, n| c.patch_pos_emb.then_some((id, n));
        let third = self.mlp(tape, &self.ids.third, third, pos(self.ids.third_pos, tn))?;
        let wrist = self.mlp(tape, &self.ids.wrist, wrist, pos(self.ids.wrist_pos, wn))?;
        let proprio = self.mlp(tape, &self.ids.proprio, proprio, None)?;
        let all = tape.concat_rows(&[third, wrist, proprio])?;
        let n = c.pooled_items();
        let mut order = Vec::with_capacity(s * n);
        for i in 0..s {
            order.extend(i * tn..(i + 1) * tn);
            order.extend(s * tn + i * wn..s * tn + (i + 1) * wn);
            order.push(s * (tn + wn) + i);
        }
        let items = tape.gather_rows(all, &order)?;
        let items = tape.reshape(items, [s, n, c.d_model])?;
        let pooled = self.attention_pool(tape, items)?;
        let w = tape.param(&self.params, self.ids.pool_w);
        let b = tape.param(&self.params, self.ids.pool_b);
        let out = tape.matmul(pooled, w)?;
        tape.add(out, b)
    }

    /// Reasoning tokens `[R, d]`; masked entries encode the zero vector.
    pub fn encode_reasoning<'p>(&'p self, tape: &mut Tape<'p>, traces: &[Option<[f32; TRACE_DIM]>]) -> Result<Var> {
        let mut data = Vec::with_capacity(traces.len() * TRACE_DIM);
        for t in traces {
            let v = t.unwrap_or([0.0; TRACE_DIM]);
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(invalid(format!("trace values {v:?} outside [0, 1]")));
            }
            data.extend_from_slice(&v);
        }
        let x = tape.constant([traces.len(), TRACE_DIM], data)?;
        self.mlp(tape, &self.ids.reasoning, x, None)
    }

    /// Action tokens `[A, d]`.
    pub fn encode_actions<'p>(&'p self, tape: &mut Tape<'p>, actions: &[[f32; 4]]) -> Result<Var> {
        let k = self.config.action_scale;
        let data = actions.iter().flat_map(|a| a.map(|v| v * k)).collect();
        let x = tape.constant([actions.len(), 4], data)?;
        self.mlp(tape, &self.ids.action, x, None)
    }

    /// Token embeddings `[n, d]` in input order.
    pub fn embed_tokens<'p>(&'p self, tape: &mut Tape<'p>, tokens: &[TokenInput]) -> Result<Var> {
        let mut states = Vec::new();
        let mut traces = Vec::new();
        let mut actions = Vec::new();
        let mut slot = Vec::with_capacity(tokens.len());
        for tok in tokens {
            match *tok {
                TokenInput::State { third, wrist, proprio } => {
                    slot.push((0, states.len()));
                    states.push((third, wrist, proprio));
                }
                TokenInput::Reasoning(t) => {
                    slot.push((1, traces.len()));
                    traces.push(t);
                }
                TokenInput::Action(a) => {
                    slot.push((2, actions.len()));
                    actions.push(a);
                }
            }
        }
        let mut parts = Vec::new();
        if !states.is_empty() {
            parts.push(self.encode_states(tape, &states)?);
        }
        if !traces.is_empty() {
            parts.push(self.encode_reasoning(tape, &traces)?);
        }
        if !actions.is_empty() {
            parts.push(self.encode_actions(tape, &actions)?);
        }
        let offsets = [0, states.len(), states.len() + traces.len()];
        let all = tape.concat_rows(&parts)?;
        let idx: Vec<usize> = slot.iter().map(|&(g, i)| offsets[g] + i).collect();
        tape.gather_rows(all, &idx)
    }

    fn block<'p>(&'p self, tape: &mut Tape<'p>, b: &Block, x: Var, pos0: usize, cache: Option<(&mut KvCache, usize)>) -> Result<Var> {
        let c = &self.config;
        let p = |tape: &mut Tape<'p>, id| tape.param(&self.params, id);
        let g = p(tape, b.attn_norm);
        let xn = tape.rms_norm(x, g, c.norm_eps)?;
        let (wq, wk, wv, wo) = (p(tape, b.wq), p(tape, b.wk), p(tape, b.wv), p(tape, b.wo));
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let q = tape.rope(q, c.n_heads, pos0, c.rope_base)?;
        let k = tape.rope(k, c.n_heads, pos0, c.rope_base)?;
        let a = match cache {
            Some((cache, layer)) => {
                cache.keys[layer].extend_from_slice(tape.data(k));
                cache.values[layer].extend_from_slice(tape.data(v));
                tape.attention_over(q, &cache.keys[layer], &cache.values[layer], c.n_heads, pos0)?
            }
            None => tape.attention(q, k, v, c.n_heads, pos0)?,
        };
        let a = tape.matmul(a, wo)?;
        let h = tape.add(x, a)?;
        let g = p(tape, b.ffn_norm);
        let hn = tape.rms_norm(h, g, c.norm_eps)?;
        let (wg, wu, wd) = (p(tape, b.w_gate), p(tape, b.w_up), p(tape, b.w_down));
        let gate = tape.matmul(hn, wg)?;
        let gate = tape.silu(gate)?;
        let up = tape.matmul(hn, wu)?;
        let f = tape.mul(gate, up)?;
        let f = tape.matmul(f, wd)?;
        tape.add(h, f)
    }

    /// Runs `tokens` at positions `pos0..` through the transformer and both
    /// heads. With a cache, `pos0` must equal its length and the new keys and
    /// values are appended to it.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, tokens: &[TokenInput], pos0: usize, mut cache: Option<&mut KvCache>) -> Result<Outputs> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(invalid("forward over an empty token run"));
        }
        if pos0 + tokens.len() > c.max_context {
            return Err(Error::ContextOverflow {
                needed: pos0 + tokens.len(),
                max: c.max_context,
            });
        }
        if let Some(cache) = cache.as_deref() {
            if cache.len() != pos0 {
                return Err(invalid(format!("cache holds {} positions but decoding starts at {pos0}", cache.len())));
            }
        }
        let mut state_rows = Vec::new();
        let mut reasoning_rows = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            let expected = Role::of_position(pos0 + i);
            if tok.role() != expected {
                return Err(invalid(format!("token at position {} is {:?}, layout expects {expected:?}", pos0 + i, tok.role())));
            }
            match expected {
                Role::State => state_rows.push(i),
                Role::Reasoning => reasoning_rows.push(i),
                Role::Action => {}
            }
        }
        let mut x = self.embed_tokens(tape, tokens)?;
        for (l, b) in self.ids.blocks.iter().enumerate() {
            x = self.block(tape, b, x, pos0, cache.as_deref_mut().map(|c| (c, l)))?;
        }
        let g = tape.param(&self.params, self.ids.final_norm);
        let hidden = tape.rms_norm(x, g, c.norm_eps)?;
        let head = |tape: &mut Tape<'p>, rows: &[usize], w, b| -> Result<Option<Var>> {
            if rows.is_empty() {
                return Ok(None);
            }
            let h = tape.gather_rows(hidden, rows)?;
            let w = tape.param(&self.params, w);
            let b = tape.param(&self.params, b);
            let y = tape.matmul(h, w)?;
            Ok(Some(tape.add(y, b)?))
        };
        let reasoning = head(tape, &state_rows, self.ids.reason_head_w, self.ids.reason_head_b)?;
        let chunks = head(tape, &reasoning_rows, self.ids.chunk_head_w, self.ids.chunk_head_b)?;
        Ok(Outputs {
            hidden,
            reasoning,
            chunks,
            state_rows,
            reasoning_rows,
        })
    }
}
