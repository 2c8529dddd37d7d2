//! Which prunable axis indexes each dimension of each parameter tensor.
//!
//! The layout table is the single source of truth for group coordinates,
//! live-parameter counting and recompilation.

use super::arch::ArchSpec;
use super::mask::MaskSet;

/// Role of one tensor dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Free,
    Emb,
    Head(usize),
    Qk(usize),
    V(usize),
    Mlp(usize),
}

/// Residual branch a tensor belongs to; the whole tensor disappears when its
/// branch is emptied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Attn(usize),
    Mlp(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
    pub axes: Vec<Axis>,
    pub owner: Option<Branch>,
}

impl ParamLayout {
    fn new(name: String, shape: Vec<usize>, axes: Vec<Axis>, owner: Option<Branch>) -> Self {
        debug_assert_eq!(shape.len(), axes.len());
        ParamLayout {
            name,
            shape,
            axes,
            owner,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Index of the head axis, which is always the leading one when present.
    pub fn head_axis(&self) -> Option<usize> {
        self.axes.iter().position(|a| matches!(a, Axis::Head(_)))
    }

    pub fn has_axis(&self, axis: Axis) -> bool {
        self.axes.contains(&axis)
    }

    /// Calls `f(multi_index, flat_index)` for every element in row-major order.
    pub fn for_each_index(&self, mut f: impl FnMut(&[usize], usize)) {
        let n = self.numel();
        let mut idx = vec![0usize; self.shape.len()];
        for flat in 0..n {
            f(&idx, flat);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }

    /// Whether the element at `idx` survives under `masks`.
    pub fn is_live(&self, idx: &[usize], masks: &MaskSet) -> bool {
        if !owner_alive(self.owner, masks) {
            return false;
        }
        let head = self.head_axis().map(|a| idx[a]);
        self.axes
            .iter()
            .zip(idx)
            .all(|(axis, &i)| axis_live(*axis, i, head, masks))
    }

    /// Number of surviving elements under `masks`.
    pub fn live_count(&self, masks: &MaskSet) -> usize {
        if !owner_alive(self.owner, masks) {
            return 0;
        }
        let mut total = 0;
        let heads: Vec<Option<usize>> = match self.head_axis() {
            Some(a) => (0..self.shape[a]).map(Some).collect(),
            None => vec![None],
        };
        for head in heads {
            let mut prod = 1usize;
            for (axis, &len) in self.axes.iter().zip(&self.shape) {
                let live = match axis {
                    Axis::Head(_) => usize::from(axis_live(*axis, head.unwrap(), head, masks)),
                    _ => (0..len)
                        .filter(|&i| axis_live(*axis, i, head, masks))
                        .count(),
                };
                prod *= live;
            }
            total += prod;
        }
        total
    }
}

fn owner_alive(owner: Option<Branch>, masks: &MaskSet) -> bool {
    match owner {
        None => true,
        Some(Branch::Attn(b)) => masks.blocks[b].attn_alive(),
        Some(Branch::Mlp(b)) => masks.blocks[b].mlp_alive(),
    }
}

fn axis_live(axis: Axis, i: usize, head: Option<usize>, masks: &MaskSet) -> bool {
    match axis {
        Axis::Free => true,
        Axis::Emb => masks.emb[i],
        Axis::Head(b) => masks.blocks[b].head_alive(i),
        Axis::Qk(b) => masks.blocks[b].qk[head.expect("qk axis without head axis")][i],
        Axis::V(b) => masks.blocks[b].v[head.expect("v axis without head axis")][i],
        Axis::Mlp(b) => masks.blocks[b].mlp[i],
    }
}

/// Parameter tensors of a model in canonical order.
pub fn param_layouts(spec: &ArchSpec) -> Vec<ParamLayout> {
    use Axis::*;
    let e = spec.emb;
    let mut out = vec![
        ParamLayout::new(
            "patch_embed.weight".into(),
            vec![e, spec.patch_dim()],
            vec![Emb, Free],
            None,
        ),
        ParamLayout::new("patch_embed.bias".into(), vec![e], vec![Emb], None),
        ParamLayout::new("cls_token".into(), vec![e], vec![Emb], None),
        ParamLayout::new("dist_token".into(), vec![e], vec![Emb], None),
        ParamLayout::new(
            "pos_embed".into(),
            vec![spec.num_tokens(), e],
            vec![Free, Emb],
            None,
        ),
    ];
    for (b, d) in spec.blocks.iter().enumerate() {
        let p = |s: &str| format!("blocks.{b}.{s}");
        if d.has_attn() {
            let o = Some(Branch::Attn(b));
            out.extend([
                ParamLayout::new(p("norm1.weight"), vec![e], vec![Emb], o),
                ParamLayout::new(p("norm1.bias"), vec![e], vec![Emb], o),
                ParamLayout::new(
                    p("attn.q.weight"),
                    vec![d.h, d.qk, e],
                    vec![Head(b), Qk(b), Emb],
                    o,
                ),
                ParamLayout::new(p("attn.q.bias"), vec![d.h, d.qk], vec![Head(b), Qk(b)], o),
                ParamLayout::new(
                    p("attn.k.weight"),
                    vec![d.h, d.qk, e],
                    vec![Head(b), Qk(b), Emb],
                    o,
                ),
                ParamLayout::new(p("attn.k.bias"), vec![d.h, d.qk], vec![Head(b), Qk(b)], o),
                ParamLayout::new(
                    p("attn.v.weight"),
                    vec![d.h, d.v, e],
                    vec![Head(b), V(b), Emb],
                    o,
                ),
                ParamLayout::new(p("attn.v.bias"), vec![d.h, d.v], vec![Head(b), V(b)], o),
                ParamLayout::new(
                    p("attn.proj.weight"),
                    vec![d.h, e, d.v],
                    vec![Head(b), Emb, V(b)],
                    o,
                ),
                ParamLayout::new(p("attn.proj.bias"), vec![e], vec![Emb], o),
            ]);
        }
        if d.has_mlp() {
            let o = Some(Branch::Mlp(b));
            out.extend([
                ParamLayout::new(p("norm2.weight"), vec![e], vec![Emb], o),
                ParamLayout::new(p("norm2.bias"), vec![e], vec![Emb], o),
                ParamLayout::new(p("mlp.fc1.weight"), vec![d.mlp, e], vec![Mlp(b), Emb], o),
                ParamLayout::new(p("mlp.fc1.bias"), vec![d.mlp], vec![Mlp(b)], o),
                ParamLayout::new(p("mlp.fc2.weight"), vec![e, d.mlp], vec![Emb, Mlp(b)], o),
                ParamLayout::new(p("mlp.fc2.bias"), vec![e], vec![Emb], o),
            ]);
        }
    }
    let c = spec.num_classes;
    out.extend([
        ParamLayout::new("norm.weight".into(), vec![e], vec![Emb], None),
        ParamLayout::new("norm.bias".into(), vec![e], vec![Emb], None),
        ParamLayout::new("head.weight".into(), vec![c, e], vec![Free, Emb], None),
        ParamLayout::new("head.bias".into(), vec![c], vec![Free], None),
        ParamLayout::new("head_dist.weight".into(), vec![c, e], vec![Free, Emb], None),
        ParamLayout::new("head_dist.bias".into(), vec![c], vec![Free], None),
    ]);
    out
}

/// Surviving parameter count of `spec` under `masks`.
pub fn live_param_count(spec: &ArchSpec, masks: &MaskSet) -> usize {
    param_layouts(spec)
        .iter()
        .map(|l| l.live_count(masks))
        .sum()
}

/// Names of the weights of linear projections inside transformer blocks,
/// each paired with its logical `(out, in)` extents.
pub fn block_linear_weights(spec: &ArchSpec) -> Vec<(String, (usize, usize))> {
    let e = spec.emb;
    let mut out = Vec::new();
    for (b, d) in spec.blocks.iter().enumerate() {
        if d.has_attn() {
            for n in ["q", "k"] {
                out.push((format!("blocks.{b}.attn.{n}.weight"), (d.h * d.qk, e)));
            }
            out.push((format!("blocks.{b}.attn.v.weight"), (d.h * d.v, e)));
            out.push((format!("blocks.{b}.attn.proj.weight"), (e, d.h * d.v)));
        }
        if d.has_mlp() {
            out.push((format!("blocks.{b}.mlp.fc1.weight"), (d.mlp, e)));
            out.push((format!("blocks.{b}.mlp.fc2.weight"), (e, d.mlp)));
        }
    }
    out
}
