use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::arch::ArchSpec;
use super::layout::{param_layouts, ParamLayout};
use super::mask::MaskSet;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

/// A DEIT-style vision transformer with class and distillation tokens.
///
/// Tensors are stored in [`param_layouts`] order. Blocks whose attention or
/// MLP branch has been recompiled away simply carry no tensors for it.
#[derive(Debug, Clone)]
pub struct Vit {
    spec: ArchSpec,
    layouts: Vec<ParamLayout>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct VitOutput {
    pub logits_cls: Var,
    pub logits_dist: Var,
    /// Post-softmax attention `[B·h, N, N]` per block, when captured.
    pub attn: Vec<Option<Var>>,
}

fn trunc_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f32, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x = dist.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

impl Vit {
    /// Fresh model: truncated-normal weights, zero biases, unit LayerNorm gains.
    pub fn init(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layouts = param_layouts(spec);
        let tensors = layouts
            .iter()
            .map(|l| {
                let n = l.numel();
                let data = if l.name.ends_with("norm1.weight")
                    || l.name.ends_with("norm2.weight")
                    || l.name == "norm.weight"
                {
                    vec![1.0; n]
                } else if l.name.ends_with("bias") {
                    vec![0.0; n]
                } else {
                    trunc_normal(rng, n)
                };
                Tensor::new(l.shape.clone(), data).map(Tensor::requiring_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(spec.clone(), layouts, tensors)
    }

    /// Builds a model from named tensors, which must match the layout exactly.
    pub fn from_tensors(spec: &ArchSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let layouts = param_layouts(spec);
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(layouts.len());
        for l in &layouts {
            let t = by_name
                .remove(&l.name)
                .ok_or_else(|| Error::Arch(format!("missing tensor `{}`", l.name)))?;
            if t.shape() != l.shape.as_slice() {
                return Err(Error::Arch(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    l.name,
                    t.shape(),
                    l.shape
                )));
            }
            tensors.push(t.requiring_grad());
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Arch(format!("unexpected tensor `{extra}`")));
        }
        Self::assemble(spec.clone(), layouts, tensors)
    }

    fn assemble(spec: ArchSpec, layouts: Vec<ParamLayout>, tensors: Vec<Tensor>) -> Result<Self> {
        let index = layouts
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        Ok(Vit {
            spec,
            layouts,
            tensors,
            index,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layouts(&self) -> &[ParamLayout] {
        &self.layouts
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamLayout, &Tensor)> {
        self.layouts.iter().zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds graph gradients into the tensors. Tensors the graph never used
    /// (skipped branches) get a zero gradient.
    pub fn accumulate_grads(&mut self, g: &Graph) -> Result<()> {
        for (l, t) in self.layouts.iter().zip(&mut self.tensors) {
            match g.param_grad(&l.name) {
                Some(grad) => t.accumulate_grad(grad)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = g.param_var(name) {
            return Ok(v);
        }
        let t = self
            .get(name)
            .ok_or_else(|| Error::Arch(format!("no tensor `{name}`")))?;
        Ok(g.param(name, t))
    }

    /// Records a forward pass of `images` `[B, C, H, W]` on `g`. With `masks`,
    /// pruned channels, heads and neurons are multiplied out so that the
    /// result equals the recompiled dense model.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        masks: Option<&MaskSet>,
        capture_attn: bool,
    ) -> Result<VitOutput> {
        if let Some(m) = masks {
            m.check_against(&self.spec)?;
        }
        let spec = &self.spec;
        let (bsz, patches) = patchify(spec, images)?;
        let (e, p) = (spec.emb, spec.num_patches());

        let emb_mask = masks.map(MaskSet::emb_multiplier);
        let emb_mul = match &emb_mask {
            Some(m) => Some(g.constant(vec![e], m.clone())?),
            None => None,
        };
        let mask_emb = |g: &mut Graph, x: Var| -> Result<Var> {
            match emb_mul {
                Some(m) => g.mul(x, m),
                None => Ok(x),
            }
        };

        let px = g.constant(vec![bsz * p, spec.patch_dim()], patches)?;
        let pw = self.p(g, "patch_embed.weight")?;
        let pb = self.p(g, "patch_embed.bias")?;
        let x = g.linear(px, pw, Some(pb))?;
        let x = g.reshape(x, &[bsz, p, e])?;
        let cls = self.p(g, "cls_token")?;
        let dist = self.p(g, "dist_token")?;
        let x = g.assemble_tokens(x, cls, dist)?;
        let pos = self.p(g, "pos_embed")?;
        let x = g.add(x, pos)?;
        let mut x = mask_emb(g, x)?;

        let mut attn = Vec::with_capacity(spec.num_blocks());
        for b in 0..spec.num_blocks() {
            let (y, captured) = self.forward_block(g, b, x, masks, emb_mul, capture_attn)?;
            x = y;
            attn.push(captured);
        }

        let nw = self.p(g, "norm.weight")?;
        let nb = self.p(g, "norm.bias")?;
        let x = g.layernorm(x, nw, nb, emb_mask.as_deref(), LN_EPS)?;
        let head = |g: &mut Graph, tok: usize, name: &str| -> Result<Var> {
            let t = g.select_token(x, tok)?;
            let w = self.p(g, &format!("{name}.weight"))?;
            let b = self.p(g, &format!("{name}.bias"))?;
            g.linear(t, w, Some(b))
        };
        let logits_cls = head(g, 0, "head")?;
        let logits_dist = head(g, 1, "head_dist")?;
        Ok(VitOutput {
            logits_cls,
            logits_dist,
            attn,
        })
    }

    /// One transformer block applied to tokens `x` `[B, N, E]`. `emb_mul` is
    /// the graph constant holding the EMB keep-multiplier when masked.
    pub fn forward_block(
        &self,
        g: &mut Graph,
        b: usize,
        x: Var,
        masks: Option<&MaskSet>,
        emb_mul: Option<Var>,
        capture_attn: bool,
    ) -> Result<(Var, Option<Var>)> {
        let spec = &self.spec;
        let d = &spec.blocks[b];
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != spec.emb {
            return Err(Error::Shape {
                op: "forward_block",
                detail: format!("tokens {xs:?} for emb {}", spec.emb),
            });
        }
        let (bsz, n, e) = (xs[0], xs[1], xs[2]);
        let emb_mask = masks.map(MaskSet::emb_multiplier);
        let mask_emb = |g: &mut Graph, x: Var| -> Result<Var> {
            match emb_mul {
                Some(m) => g.mul(x, m),
                None => Ok(x),
            }
        };
        let mut x = x;
        let bm = masks.map(|m| &m.blocks[b]);
        let pre = |s: &str| format!("blocks.{b}.{s}");

        let mut captured = None;
        if d.has_attn() && bm.is_none_or(|m| m.attn_alive()) {
            let (h, qk, v) = (d.h, d.qk, d.v);
            let w1 = self.p(g, &pre("norm1.weight"))?;
            let b1 = self.p(g, &pre("norm1.bias"))?;
            let y = g.layernorm(x, w1, b1, emb_mask.as_deref(), LN_EPS)?;
            let y = g.reshape(y, &[bsz * n, e])?;

            let proj_in =
                |g: &mut Graph, name: &str, width: usize, mult: Option<Vec<f32>>| -> Result<Var> {
                    let w = self.p(g, &pre(&format!("attn.{name}.weight")))?;
                    let bias = self.p(g, &pre(&format!("attn.{name}.bias")))?;
                    let w = g.reshape(w, &[h * width, e])?;
                    let bias = g.reshape(bias, &[h * width])?;
                    let mut out = g.linear(y, w, Some(bias))?;
                    if let Some(m) = mult {
                        let m = g.constant(vec![h * width], m)?;
                        out = g.mul(out, m)?;
                    }
                    let out = g.reshape(out, &[bsz, n, h, width])?;
                    let out = g.permute(out, &[0, 2, 1, 3])?;
                    g.reshape(out, &[bsz * h, n, width])
                };
            let q = proj_in(g, "q", qk, bm.map(|m| m.qk_multiplier()))?;
            let k = proj_in(g, "k", qk, bm.map(|m| m.qk_multiplier()))?;
            let vv = proj_in(g, "v", v, bm.map(|m| m.v_multiplier()))?;

            let live_qk = bm.map_or(qk, |m| m.effective_qk());
            let scale = if live_qk == 0 {
                1.0
            } else {
                1.0 / (live_qk as f32).sqrt()
            };
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, scale);
            let probs = g.softmax(s);
            if capture_attn {
                captured = Some(probs);
            }
            let o = g.bmm(probs, vv, false)?;
            let o = g.reshape(o, &[bsz, h, n, v])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[bsz * n, h * v])?;
            let pw = self.p(g, &pre("attn.proj.weight"))?;
            let pw = g.permute(pw, &[1, 0, 2])?;
            let pw = g.reshape(pw, &[e, h * v])?;
            let pb = self.p(g, &pre("attn.proj.bias"))?;
            let o = g.linear(o, pw, Some(pb))?;
            let o = g.reshape(o, &[bsz, n, e])?;
            let o = mask_emb(g, o)?;
            x = g.add(x, o)?;
        }

        if d.has_mlp() && bm.is_none_or(|m| m.mlp_alive()) {
            let w2 = self.p(g, &pre("norm2.weight"))?;
            let b2 = self.p(g, &pre("norm2.bias"))?;
            let y = g.layernorm(x, w2, b2, emb_mask.as_deref(), LN_EPS)?;
            let y = g.reshape(y, &[bsz * n, e])?;
            let f1 = self.p(g, &pre("mlp.fc1.weight"))?;
            let f1b = self.p(g, &pre("mlp.fc1.bias"))?;
            let hdn = g.linear(y, f1, Some(f1b))?;
            let mut hdn = g.gelu(hdn);
            if let Some(m) = bm {
                let m = g.constant(vec![d.mlp], m.mlp_multiplier())?;
                hdn = g.mul(hdn, m)?;
            }
            let f2 = self.p(g, &pre("mlp.fc2.weight"))?;
            let f2b = self.p(g, &pre("mlp.fc2.bias"))?;
            let o = g.linear(hdn, f2, Some(f2b))?;
            let o = g.reshape(o, &[bsz, n, e])?;
            let o = mask_emb(g, o)?;
            x = g.add(x, o)?;
        }
        Ok((x, captured))
    }

    /// Averaged class/distillation logits `[B × classes]` without gradients.
    pub fn predict(&self, images: &Tensor, masks: Option<&MaskSet>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, masks, false)?;
        Ok(g.value(out.logits_cls)
            .iter()
            .zip(g.value(out.logits_dist))
            .map(|(a, b)| 0.5 * (a + b))
            .collect())
    }
}

/// Cuts `[B, C, H, W]` images into `[B·P, C·p·p]` patch rows in raster order,
/// each row ordered channel-major like a strided convolution kernel.
pub fn patchify(spec: &ArchSpec, images: &Tensor) -> Result<(usize, Vec<f32>)> {
    let s = images.shape();
    let (c, side, ps) = (spec.in_channels, spec.image_size, spec.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("images {s:?}, expected [B, {c}, {side}, {side}]"),
        });
    }
    let bsz = s[0];
    let per = side / ps;
    let data = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..bsz {
        for py in 0..per {
            for pxi in 0..per {
                for ch in 0..c {
                    for dy in 0..ps {
                        let row = ((bi * c + ch) * side + py * ps + dy) * side + pxi * ps;
                        out.extend_from_slice(&data[row..row + ps]);
                    }
                }
            }
        }
    }
    Ok((bsz, out))
}
