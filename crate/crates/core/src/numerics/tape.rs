use super::gemm::{gemm, ROW_MAJOR};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// `a: [.., m, k]` times a shared `b: [k, n]`.
    MatMul { a: Var, b: Var },
    /// `a: [B, m, k]` times `b: [B, k, n]`.
    BatchMatMul { a: Var, b: Var },
    /// `b` is either the same shape as `a` or broadcast over `a`'s leading dims.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Silu { a: Var },
    Abs { a: Var },
    Softmax { a: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Rope { a: Var, n_heads: usize, pos0: usize, base: f32 },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape { a: Var },
    Sum { a: Var },
    WeightedSum { a: Var, w: Vec<f32> },
    MaskedMean { a: Var, mask: Vec<bool>, count: usize },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, q_offset: usize, probs: Vec<f32> },
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl std::ops::Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable computation for one forward pass.
///
/// A tape built with [`Tape::inference`] still evaluates every op but keeps
/// no backward bookkeeping, and [`Tape::backward`] on it is an error.
/// Parameters are borrowed from their [`ParamStore`] for the tape's lifetime.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && a[a.len() - b.len()..] == *b && !b.is_empty())
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant or a differentiable input, depending on
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Records a trainable parameter; its gradient flows back to the store
    /// through [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: if self.record { Op::Param(id) } else { Op::Leaf },
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        if sb.len() == 2 {
            let rows = self.value(a).numel() / k.max(1);
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, 1.0, self.data(a), ROW_MAJOR(k), self.data(b), ROW_MAJOR(n), 0.0, &mut out, ROW_MAJOR(n));
            let rg = self.rg(&[a, b]);
            let t = Tensor::new(out_shape, out)?;
            check_finite("matmul", t.data())?;
            return Ok(self.push(t, Op::MatMul { a, b }, rg));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ad = &self.data(a)[bi * m * k..(bi + 1) * m * k];
            let bd = &self.data(b)[bi * k * n..(bi + 1) * k * n];
            gemm(m, k, n, 1.0, ad, ROW_MAJOR(k), bd, ROW_MAJOR(n), 0.0, &mut out[bi * m * n..(bi + 1) * m * n], ROW_MAJOR(n));
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(out_shape, out)?;
        check_finite("matmul", t.data())?;
        Ok(self.push(t, Op::BatchMatMul { a, b }, rg))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<f32> = self.data(a).iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        check_finite(op_name, &out)?;
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out: Vec<f32> = self.data(a).iter().map(|x| x * s).collect();
        check_finite("scale", &out)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale { a, s }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f32> = self.data(a).iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        check_finite("silu", &out)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Silu { a }, rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f32> = self.data(a).iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Abs { a }, rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        check_finite("softmax", &out)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// RMS normalisation over the last dimension followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(gain) != [cols] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.data(gain).to_vec();
        let mut out = self.data(x).to_vec();
        let mut inv_rms = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            row.iter_mut().zip(&g).for_each(|(v, gi)| *v = *v * r * gi);
        }
        check_finite("rms_norm", &out)?;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        let inv_rms = if self.record { inv_rms } else { Vec::new() };
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Rotary position embedding on `[L, n_heads * head_dim]`, rotating
    /// consecutive pairs within each head; row `i` sits at position `pos0 + i`.
    pub fn rope(&mut self, a: Var, n_heads: usize, pos0: usize, base: f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = self.value(a).cols();
        if shape.len() != 2 || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                lhs: shape,
                rhs: vec![n_heads],
            });
        }
        let mut out = self.data(a).to_vec();
        rope_rotate(&mut out, d, n_heads, pos0, base, false);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Rope { a, n_heads, pos0, base }, rg))
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows of nothing"))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.data(*p));
        }
        let mut shape = vec![rows];
        shape.extend(rest);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Selects rows (first-dimension slices) by index; also serves as an
    /// embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("gather_rows on a scalar"));
        }
        let width: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= shape[0] {
                return Err(invalid(format!("gather_rows: index {i} out of range for {shape:?}")));
            }
            out.extend_from_slice(&self.data(a)[i * width..(i + 1) * width]);
        }
        let mut oshape = vec![idx.len()];
        oshape.extend_from_slice(&shape[1..]);
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum::<f32>();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// `Σ aᵢ·wᵢ` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f32>) -> Result<Var> {
        if w.len() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self.data(a).iter().zip(&w).map(|(x, y)| x * y).sum::<f32>();
        check_finite("weighted_sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { a, w }, rg))
    }

    /// Mean of the entries of `a` where `mask` is set, accumulated in `f64`.
    pub fn masked_mean(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "masked_mean",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyLossMask);
        }
        let s = self.data(a).iter().zip(&mask).filter(|(_, m)| **m).map(|(x, _)| *x as f64).sum::<f64>() / count as f64;
        let s = s as f32;
        check_finite("masked_mean", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::MaskedMean { a, mask, count }, rg))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q: [Lq, D]`, `k, v: [Lk, D]`; query row `i` sits at absolute position
    /// `q_offset + i` and attends to key rows `0..=q_offset + i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, q_offset: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] || n_heads == 0 || sq[1] % n_heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (lq, lk, d) = (sq[0], sk[0], sq[1]);
        if q_offset + lq > lk {
            return Err(invalid(format!(
                "attention: queries reach position {} but only {lk} keys exist",
                q_offset + lq
            )));
        }
        let mut probs = vec![0.0; n_heads * lq * lk];
        let out = attention_values(self.data(q), self.data(k), self.data(v), lq, lk, d, n_heads, q_offset, &mut probs);
        check_finite("attention", &out)?;
        let t = Tensor::new(vec![lq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                q_offset,
                probs,
            },
            rg,
        ))
    }

    /// Attention of `q` over raw key and value rows, for decoding against a
    /// cache. Only available on inference tapes.
    pub fn attention_over(&mut self, q: Var, keys: &[f32], values: &[f32], n_heads: usize, q_offset: usize) -> Result<Var> {
        if self.record {
            return Err(invalid("attention_over is inference-only"));
        }
        let sq = self.shape(q).to_vec();
        let d = sq.get(1).copied().unwrap_or(0);
        if sq.len() != 2 || d == 0 || n_heads == 0 || d % n_heads != 0 || keys.len() != values.len() || keys.len() % d != 0 {
            return Err(Error::Shape {
                op: "attention_over",
                lhs: sq,
                rhs: vec![keys.len(), values.len()],
            });
        }
        let (lq, lk) = (sq[0], keys.len() / d);
        if q_offset + lq > lk {
            return Err(invalid(format!("attention: queries reach position {} but only {lk} keys exist", q_offset + lq)));
        }
        let mut probs = vec![0.0; n_heads * lq * lk];
        let out = attention_values(self.data(q), keys, values, lq, lk, d, n_heads, q_offset, &mut probs);
        check_finite("attention", &out)?;
        let t = Tensor::new(vec![lq, d], out)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Propagates gradients of the scalar `loss` to every recorded node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(invalid("backward on an inference tape"));
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Every differentiable node gets a buffer, even when the loss does not depend on it.
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of every recorded parameter, in recording order. A parameter
    /// recorded more than once appears once per recording.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, Vec<f32>)>> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = n.op {
                let g = self.grads.get(i).and_then(|g| g.clone()).ok_or_else(|| Error::MissingGrad(format!("#{}", id.index())))?;
                out.push((id, g));
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.numel() / k.max(1);
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, va.numel());
                    gemm(rows, n, k, 1.0, g, ROW_MAJOR(n), vb.data(), (1, n as isize), 1.0, ga, ROW_MAJOR(k));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, *b, vb.numel());
                    gemm(k, rows, n, 1.0, va.data(), (1, k as isize), g, ROW_MAJOR(n), 1.0, gb, ROW_MAJOR(n));
                }
            }
            Op::BatchMatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, va.numel());
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[bi * m * n..],
                            ROW_MAJOR(n),
                            &vb.data()[bi * k * n..],
                            (1, n as isize),
                            1.0,
                            &mut ga[bi * m * k..],
                            ROW_MAJOR(k),
                        );
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, *b, vb.numel());
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &va.data()[bi * m * k..],
                            (1, k as isize),
                            &g[bi * m * n..],
                            ROW_MAJOR(n),
                            1.0,
                            &mut gb[bi * k * n..],
                            ROW_MAJOR(n),
                        );
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.nodes[b.0].requires_grad {
                    let nb = self.value(*b).numel();
                    let gb = grad_buf(grads, *b, nb);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % nb] += sign * y;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, g.len());
                    for (j, y) in g.iter().enumerate() {
                        ga[j] += y * db[j % nb];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, *b, nb);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % nb] += y * da[j];
                    }
                }
            }
            Op::Scale { a, s } => {
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Silu { a } => {
                let da = self.data(*a);
                let ga = grad_buf(grads, *a, g.len());
                for j in 0..g.len() {
                    let x = da[j];
                    let sig = 1.0 / (1.0 + (-x).exp());
                    ga[j] += g[j] * sig * (1.0 + x * (1.0 - sig));
                }
            }
            Op::Abs { a } => {
                let da = self.data(*a);
                let ga = grad_buf(grads, *a, g.len());
                for j in 0..g.len() {
                    let s = if da[j] > 0.0 {
                        1.0
                    } else if da[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[j] += g[j] * s;
                }
            }
            Op::Softmax { a } => {
                let cols = out.cols();
                let ga = grad_buf(grads, *a, g.len());
                for ((y, gy), gx) in out.data().chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = out.cols();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                if self.nodes[gain.0].requires_grad {
                    let gg = grad_buf(grads, *gain, cols);
                    for (r, (xr, gr)) in xd.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        for j in 0..cols {
                            gg[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gx = grad_buf(grads, *x, xd.len());
                    for (r, ((xr, gr), gxr)) in xd.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                        let ir = inv_rms[r];
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += gr[j] * gd[j] * xr[j] * ir;
                        }
                        dot /= cols as f32;
                        for j in 0..cols {
                            gxr[j] += ir * (gr[j] * gd[j] - xr[j] * ir * dot);
                        }
                    }
                }
            }
            Op::Rope { a, n_heads, pos0, base } => {
                let d = out.cols();
                let mut back = g.to_vec();
                rope_rotate(&mut back, d, *n_heads, *pos0, *base, true);
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.nodes[p.0].requires_grad {
                        let gp = grad_buf(grads, *p, n);
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let va = self.value(*a);
                let width: usize = va.shape()[1..].iter().product();
                let ga = grad_buf(grads, *a, va.numel());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * width..(src + 1) * width];
                    dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape { a } => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                let ga = grad_buf(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::WeightedSum { a, w } => {
                let ga = grad_buf(grads, *a, w.len());
                ga.iter_mut().zip(w).for_each(|(x, wi)| *x += g[0] * wi);
            }
            Op::MaskedMean { a, mask, count } => {
                let ga = grad_buf(grads, *a, mask.len());
                let w = g[0] / *count as f32;
                ga.iter_mut().zip(mask).filter(|(_, m)| **m).for_each(|(x, _)| *x += w);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                q_offset,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *n_heads, *q_offset, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, g: &[f32], q: Var, k: Var, v: Var, n_heads: usize, q_offset: usize, probs: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let d = self.value(q).cols();
        let lq = self.value(q).rows();
        let lk = self.value(k).rows();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (rq, rk, rv) = (self.nodes[q.0].requires_grad, self.nodes[k.0].requires_grad, self.nodes[v.0].requires_grad);
        let mut gq = rq.then(|| vec![0.0; lq * d]);
        let mut gk = rk.then(|| vec![0.0; lk * d]);
        let mut gv = rv.then(|| vec![0.0; lk * d]);
        let mut ds = vec![0.0; QUERY_BLOCK * lk];
        for h in 0..n_heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            for (i0, i1) in query_blocks(lq) {
                let vis = (q_offset + i1).min(lk);
                let rows = i1 - i0;
                let pb = &p[i0 * lk..i1 * lk];
                let gb = &g[i0 * d + h * hd..];
                if let Some(gv) = gv.as_mut() {
                    // dV += Pᵀ · dO
                    gemm(vis, rows, hd, 1.0, pb, (1, lk as isize), gb, (d as isize, 1), 1.0, &mut gv[h * hd..], (d as isize, 1));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = dO · Vᵀ, then the softmax Jacobian
                let dsb = &mut ds[..rows * lk];
                gemm(rows, hd, vis, 1.0, gb, (d as isize, 1), &vd[h * hd..], (1, d as isize), 0.0, dsb, ROW_MAJOR(lk));
                for (pr, dr) in pb.chunks(lk).zip(dsb.chunks_mut(lk)) {
                    let dot: f32 = pr[..vis].iter().zip(&dr[..vis]).map(|(a, b)| a * b).sum();
                    for j in 0..vis {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(rows, vis, hd, 1.0, dsb, ROW_MAJOR(lk), &kd[h * hd..], (d as isize, 1), 1.0, &mut gq[i0 * d + h * hd..], (d as isize, 1));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(vis, rows, hd, 1.0, dsb, (1, lk as isize), &qd[i0 * d + h * hd..], (d as isize, 1), 1.0, &mut gk[h * hd..], (d as isize, 1));
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                let dst = grad_buf(grads, var, buf.len());
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

#[allow(clippy::too_many_arguments)]
fn attention_values(qd: &[f32], kd: &[f32], vd: &[f32], lq: usize, lk: usize, d: usize, n_heads: usize, q_offset: usize, probs: &mut [f32]) -> Vec<f32> {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0; lq * d];
    for h in 0..n_heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        for (i0, i1) in query_blocks(lq) {
            // keys past the block's last visible position are masked for every row
            let vis = (q_offset + i1).min(lk);
            let rows = i1 - i0;
            let pb = &mut p[i0 * lk..i1 * lk];
            gemm(rows, hd, vis, scale, &qd[i0 * d + h * hd..], (d as isize, 1), &kd[h * hd..], (1, d as isize), 0.0, pb, ROW_MAJOR(lk));
            for (r, row) in pb.chunks_mut(lk).enumerate() {
                let visible = q_offset + i0 + r + 1;
                softmax_in_place(&mut row[..visible]);
                row[visible..].fill(0.0);
            }
            gemm(rows, vis, hd, 1.0, pb, ROW_MAJOR(lk), &vd[h * hd..], (d as isize, 1), 0.0, &mut out[i0 * d + h * hd..], (d as isize, 1));
        }
    }
    out
}

const QUERY_BLOCK: usize = 64;

fn query_blocks(lq: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..lq).step_by(QUERY_BLOCK).map(move |i0| (i0, (i0 + QUERY_BLOCK).min(lq)))
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn rope_rotate(data: &mut [f32], d: usize, n_heads: usize, pos0: usize, base: f32, inverse: bool) {
    let hd = d / n_heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|p| (base as f64).powf(-2.0 * p as f64 / hd as f64)).collect();
    for (i, row) in data.chunks_mut(d).enumerate() {
        let pos = (pos0 + i) as f64;
        for (p, f) in freqs.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let (s, c) = (if inverse { -s } else { s } as f32, c as f32);
            for h in 0..n_heads {
                let j = h * hd + 2 * p;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
