use std::collections::HashMap;

use super::kernels::{self, inverse_perm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Box<LayerNormCache>),
    Gelu(Var),
    Assemble { patches: Var, cls: Var, dist: Var },
    Select(Var, usize),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlDiv { logits: Var, target: Vec<f32> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct LayerNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    mask: Vec<f32>,
    xhat: Vec<f32>,
    rstd: Vec<f32>,
    active: f32,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// reverse insertion order is a valid reverse topological order and the graph
/// is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<String, Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `b` broadcasts over `a` when its shape is a suffix of `a`'s shape.
fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Folds a `[lead × inner]` gradient down to `[inner]`.
fn reduce_leading(g: &[f32], inner: usize) -> Vec<f32> {
    let mut out = vec![0f32; inner];
    for chunk in g.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies a tensor in as a leaf; it tracks gradients iff the tensor does.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a named parameter leaf whose gradient can be fetched with
    /// [`Graph::param_grad`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "constant",
                format!("{shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f32]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0f32; m * n];
        kernels::mm(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x[m×in] · w[out×in]ᵀ + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", format!("{sx:?} x {sw:?}ᵀ")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {n} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0f32; m * n];
        kernels::mm_nt(self.value(x), self.value(w), m, k, n, &mut out);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, bv)| *o += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![m, n], out, Op::Linear { x, w, b }, rg))
    }

    /// Batched product over the leading axis: `[t×m×k] · [t×k×n]`, or
    /// `[t×m×k] · [t×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(shape_err(
                "bmm",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (t, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0f32; t * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        {
            use rayon::prelude::*;
            let work = |(i, o): (usize, &mut [f32])| {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                if trans_b {
                    kernels::mm_nt(ai, bi, m, k, n, o);
                } else {
                    kernels::mm(ai, bi, m, k, n, o);
                }
            };
            if t > 1 && t * m * k * n >= 1 << 15 {
                out.par_chunks_mut(m * n).enumerate().for_each(work);
            } else {
                out.chunks_mut(m * n).enumerate().for_each(work);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![t, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("{perm:?} on {sx:?}")));
        }
        let (out, shape) = kernels::permute(self.value(x), sx, perm);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let inner = numel(sb);
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(inner.max(1)) {
            chunk.iter_mut().zip(bv).for_each(|(o, x)| *o += x);
        }
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(shape_err("mul", format!("{sa:?} * {sb:?}")));
        }
        let inner = numel(sb);
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(inner.max(1)) {
            chunk.iter_mut().zip(bv).for_each(|(o, x)| *o *= x);
        }
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            log_softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::LogSoftmax(x), rg)
    }

    /// Layer normalisation over the last axis. With a channel `mask`, the
    /// statistics run over the active channels only and masked channels
    /// output exactly zero, which equals the layer with those channels removed.
    pub fn layernorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<&[f32]>,
        eps: f32,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [e] || self.shape(beta) != [e] || mask.is_some_and(|m| m.len() != e)
        {
            return Err(shape_err(
                "layernorm",
                format!("x {shape:?}, gamma {:?}", self.shape(gamma)),
            ));
        }
        let mask = mask.map(|m| m.to_vec()).unwrap_or_else(|| vec![1.0; e]);
        let active: f32 = mask.iter().sum();
        if active <= 0.0 {
            return Err(shape_err("layernorm", "no active channels".into()));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / e;
        let mut out = vec![0f32; xv.len()];
        let mut xhat = vec![0f32; xv.len()];
        let mut rstd = vec![0f32; rows];
        for r in 0..rows {
            let xr = &xv[r * e..(r + 1) * e];
            let mut s = 0f32;
            for (xi, mi) in xr.iter().zip(&mask) {
                s += mi * xi;
            }
            let mean = s / active;
            let mut var = 0f32;
            for (xi, mi) in xr.iter().zip(&mask) {
                let d = xi - mean;
                var += mi * d * d;
            }
            let rs = 1.0 / (var / active + eps).sqrt();
            rstd[r] = rs;
            for c in 0..e {
                let xh = mask[c] * (xr[c] - mean) * rs;
                xhat[r * e + c] = xh;
                out[r * e + c] = mask[c] * (g[c] * xh + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let cache = LayerNormCache {
            x,
            gamma,
            beta,
            mask,
            xhat,
            rstd,
            active,
        };
        Ok(self.push(shape, out, Op::LayerNorm(Box::new(cache)), rg))
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Gelu(x), rg)
    }

    /// Prepends class and distillation tokens: `[B×P×E] -> [B×(P+2)×E]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, dist: Var) -> Result<Var> {
        let sp = self.shape(patches).to_vec();
        if sp.len() != 3 || self.shape(cls) != [sp[2]] || self.shape(dist) != [sp[2]] {
            return Err(shape_err("assemble_tokens", format!("patches {sp:?}")));
        }
        let (bsz, p, e) = (sp[0], sp[1], sp[2]);
        let mut out = Vec::with_capacity(bsz * (p + 2) * e);
        let pv = self.value(patches);
        for bi in 0..bsz {
            out.extend_from_slice(self.value(cls));
            out.extend_from_slice(self.value(dist));
            out.extend_from_slice(&pv[bi * p * e..(bi + 1) * p * e]);
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(dist);
        Ok(self.push(
            vec![bsz, p + 2, e],
            out,
            Op::Assemble { patches, cls, dist },
            rg,
        ))
    }

    /// Picks token `idx` from `[B×N×E]`, giving `[B×E]`.
    pub fn select_token(&mut self, x: Var, idx: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || idx >= s[1] {
            return Err(shape_err("select_token", format!("token {idx} of {s:?}")));
        }
        let (bsz, n, e) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bsz * e);
        for bi in 0..bsz {
            let off = (bi * n + idx) * e;
            out.extend_from_slice(&xv[off..off + e]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![bsz, e], out, Op::Select(x, idx), rg))
    }

    /// Mean cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{s:?} with {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let lv = self.value(logits);
        let mut total = 0f64;
        for (row, &y) in lv.chunks(c).zip(labels) {
            let mut r = row.to_vec();
            log_softmax_row(&mut r);
            total -= r[y] as f64;
        }
        let loss = (total / labels.len() as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Batch-mean `Σ t·(ln t − log_softmax(logits))` against a fixed target
    /// distribution `t`, i.e. KL(target ‖ student).
    pub fn kl_div(&mut self, logits: Var, target: &[f32]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || target.len() != numel(&s) {
            return Err(shape_err(
                "kl_div",
                format!("{s:?} vs {} targets", target.len()),
            ));
        }
        let c = s[1];
        let lv = self.value(logits);
        let mut total = 0f64;
        for (row, t) in lv.chunks(c).zip(target.chunks(c)) {
            let mut r = row.to_vec();
            log_softmax_row(&mut r);
            for (lp, &ti) in r.iter().zip(t) {
                if ti > 0.0 {
                    total += ti as f64 * ((ti as f64).ln() - *lp as f64);
                }
            }
        }
        let loss = (total / s[0] as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KlDiv {
                logits,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s as f32], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![(s / n) as f32], Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar. Gradients of leaves are recomputed from
    /// scratch on every call; accumulation across passes happens in
    /// [`Tensor::accumulate_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if let Some(i) = self
            .nodes
            .iter()
            .position(|n| n.value.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "node {i} ({})",
                self.nodes[i].op.name()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
        }
        Ok(())
    }

    fn send(&mut self, v: Var, delta: Vec<f32>) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut self.grads[v.0], delta);
        }
    }

    fn backprop_node(&mut self, i: usize, gy: &[f32]) {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f32>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let mut da = vec![0f32; m * k];
                    kernels::mm_nt(gy, self.value(b), m, n, k, &mut da);
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0f32; k * n];
                    kernels::mm_tn(self.value(a), gy, m, k, n, &mut db);
                    out.push((b, db));
                }
            }
            &Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (m, k, n) = (sx[0], sx[1], sw[0]);
                if self.rg(x) {
                    let mut dx = vec![0f32; m * k];
                    kernels::mm(gy, self.value(w), m, n, k, &mut dx);
                    out.push((x, dx));
                }
                if self.rg(w) {
                    let mut dw = vec![0f32; n * k];
                    kernels::mm_tn(gy, self.value(x), m, n, k, &mut dw);
                    out.push((w, dw));
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        out.push((b, reduce_leading(gy, n)));
                    }
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (t, m, k) = (sa[0], sa[1], sa[2]);
                let n = if trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let mut da = vec![0f32; t * m * k];
                    for ti in 0..t {
                        let g = &gy[ti * m * n..(ti + 1) * m * n];
                        let bi = &bv[ti * k * n..(ti + 1) * k * n];
                        let o = &mut da[ti * m * k..(ti + 1) * m * k];
                        if trans_b {
                            kernels::mm(g, bi, m, n, k, o);
                        } else {
                            kernels::mm_nt(g, bi, m, n, k, o);
                        }
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0f32; t * k * n];
                    for ti in 0..t {
                        let g = &gy[ti * m * n..(ti + 1) * m * n];
                        let ai = &av[ti * m * k..(ti + 1) * m * k];
                        let o = &mut db[ti * k * n..(ti + 1) * k * n];
                        if trans_b {
                            kernels::mm_tn(g, ai, m, n, k, o);
                        } else {
                            kernels::mm_tn(ai, g, m, k, n, o);
                        }
                    }
                    out.push((b, db));
                }
            }
            Op::Permute(x, perm) => {
                let (dx, _) = kernels::permute(gy, &node.shape, &inverse_perm(perm));
                out.push((*x, dx));
            }
            &Op::Reshape(x) => out.push((x, gy.to_vec())),
            &Op::Add(a, b) => {
                if self.rg(a) {
                    out.push((a, gy.to_vec()));
                }
                if self.rg(b) {
                    out.push((b, reduce_leading(gy, self.value(b).len())));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let inner = bv.len();
                if self.rg(a) {
                    let mut da = gy.to_vec();
                    for chunk in da.chunks_mut(inner) {
                        chunk.iter_mut().zip(bv).for_each(|(d, x)| *d *= x);
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let prod: Vec<f32> = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                    out.push((b, reduce_leading(&prod, inner)));
                }
            }
            &Op::Scale(x, s) => out.push((x, gy.iter().map(|g| g * s).collect())),
            &Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut dx = vec![0f32; gy.len()];
                for ((d, y), g) in dx.chunks_mut(n).zip(node.value.chunks(n)).zip(gy.chunks(n)) {
                    let s: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[c] = y[c] * (g[c] - s);
                    }
                }
                out.push((x, dx));
            }
            &Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut dx = vec![0f32; gy.len()];
                for ((d, y), g) in dx.chunks_mut(n).zip(node.value.chunks(n)).zip(gy.chunks(n)) {
                    let s: f32 = g.iter().sum();
                    for c in 0..n {
                        d[c] = g[c] - y[c].exp() * s;
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm(cache) => {
                let e = cache.mask.len();
                let gamma = self.value(cache.gamma);
                let m = &cache.mask;
                if self.rg(cache.x) {
                    let mut dx = vec![0f32; gy.len()];
                    for r in 0..gy.len() / e {
                        let g = &gy[r * e..(r + 1) * e];
                        let xh = &cache.xhat[r * e..(r + 1) * e];
                        let mut s1 = 0f32;
                        let mut s2 = 0f32;
                        for c in 0..e {
                            let dxh = g[c] * m[c] * gamma[c];
                            s1 += dxh;
                            s2 += dxh * xh[c];
                        }
                        let (mean1, mean2) = (s1 / cache.active, s2 / cache.active);
                        for c in 0..e {
                            let dxh = g[c] * m[c] * gamma[c];
                            dx[r * e + c] = m[c] * cache.rstd[r] * (dxh - mean1 - xh[c] * mean2);
                        }
                    }
                    out.push((cache.x, dx));
                }
                if self.rg(cache.gamma) {
                    let mut dg = vec![0f32; e];
                    for (g, xh) in gy.chunks(e).zip(cache.xhat.chunks(e)) {
                        for c in 0..e {
                            dg[c] += g[c] * m[c] * xh[c];
                        }
                    }
                    out.push((cache.gamma, dg));
                }
                if self.rg(cache.beta) {
                    let mut db = vec![0f32; e];
                    for g in gy.chunks(e) {
                        for c in 0..e {
                            db[c] += g[c] * m[c];
                        }
                    }
                    out.push((cache.beta, db));
                }
            }
            &Op::Gelu(x) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, g)| g * gelu_grad(v))
                    .collect();
                out.push((x, dx));
            }
            &Op::Assemble { patches, cls, dist } => {
                let (bsz, n, e) = (node.shape[0], node.shape[1], node.shape[2]);
                let p = n - 2;
                let mut dp = Vec::with_capacity(bsz * p * e);
                let mut dc = vec![0f32; e];
                let mut dd = vec![0f32; e];
                for bi in 0..bsz {
                    let base = bi * n * e;
                    dc.iter_mut()
                        .zip(&gy[base..base + e])
                        .for_each(|(a, g)| *a += g);
                    dd.iter_mut()
                        .zip(&gy[base + e..base + 2 * e])
                        .for_each(|(a, g)| *a += g);
                    dp.extend_from_slice(&gy[base + 2 * e..base + n * e]);
                }
                out.push((patches, dp));
                out.push((cls, dc));
                out.push((dist, dd));
            }
            &Op::Select(x, idx) => {
                let s = self.shape(x);
                let (bsz, n, e) = (s[0], s[1], s[2]);
                let mut dx = vec![0f32; bsz * n * e];
                for bi in 0..bsz {
                    let off = (bi * n + idx) * e;
                    dx[off..off + e].copy_from_slice(&gy[bi * e..(bi + 1) * e]);
                }
                out.push((x, dx));
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.shape(*logits)[1];
                let scale = gy[0] / labels.len() as f32;
                let mut dx = self.value(*logits).to_vec();
                for (row, &y) in dx.chunks_mut(c).zip(labels) {
                    softmax_row(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, dx));
            }
            Op::KlDiv { logits, target } => {
                let s = self.shape(*logits);
                let c = s[1];
                let scale = gy[0] / s[0] as f32;
                let mut dx = self.value(*logits).to_vec();
                for (row, t) in dx.chunks_mut(c).zip(target.chunks(c)) {
                    softmax_row(row);
                    let mass: f32 = t.iter().sum();
                    for (v, ti) in row.iter_mut().zip(t) {
                        *v = (*v * mass - ti) * scale;
                    }
                }
                out.push((*logits, dx));
            }
            &Op::Sum(x) => out.push((x, vec![gy[0]; self.value(x).len()])),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                out.push((x, vec![gy[0] / n as f32; n]));
            }
        }
        for (v, d) in out {
            self.send(v, d);
        }
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Assemble { .. } => "assemble_tokens",
            Op::Select(..) => "select_token",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub fn log_softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + s.ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + x * pdf) as f32
}
