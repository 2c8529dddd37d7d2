//! Parameter and multiply-accumulate counts of architecture specs.

use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BlockDims};
use super::layout::param_layouts;

/// Counts split by where they occur. FLOPs are multiply-accumulates for one
/// image, the convention under which DEIT-B is quoted at 17.6G.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCounts {
    /// Everything except the two classifier heads.
    pub backbone_params: usize,
    pub head_params: usize,
    pub block_flops: u64,
    pub patch_flops: u64,
    pub head_flops: u64,
}

impl ModelCounts {
    pub fn total_params(&self) -> usize {
        self.backbone_params + self.head_params
    }

    pub fn total_flops(&self) -> u64 {
        self.block_flops + self.patch_flops + self.head_flops
    }
}

/// Multiply-accumulates of one block over `tokens` tokens.
pub fn block_macs(emb: usize, d: &BlockDims, tokens: usize) -> u64 {
    let (e, n) = (emb as u64, tokens as u64);
    let (h, qk, v, mlp) = (d.h as u64, d.qk as u64, d.v as u64, d.mlp as u64);
    let linear = 2 * e * h * qk + 2 * e * h * v + 2 * e * mlp;
    n * linear + n * n * h * (qk + v)
}

/// Parameters owned by one block, including its LayerNorms.
pub fn block_params(emb: usize, d: &BlockDims) -> usize {
    let e = emb;
    let attn = if d.has_attn() {
        2 * e + 2 * d.h * d.qk * (e + 1) + d.h * d.v * (e + 1) + d.h * e * d.v + e
    } else {
        0
    };
    let mlp = if d.has_mlp() {
        2 * e + d.mlp * (e + 1) + e * (d.mlp + 1)
    } else {
        0
    };
    attn + mlp
}

pub fn counts(spec: &ArchSpec) -> ModelCounts {
    let mut backbone = 0;
    let mut head = 0;
    for l in param_layouts(spec) {
        if l.name.starts_with("head") {
            head += l.numel();
        } else {
            backbone += l.numel();
        }
    }
    let n = spec.num_tokens();
    ModelCounts {
        backbone_params: backbone,
        head_params: head,
        block_flops: spec.blocks.iter().map(|d| block_macs(spec.emb, d, n)).sum(),
        patch_flops: (spec.num_patches() * spec.patch_dim() * spec.emb) as u64,
        head_flops: (2 * spec.emb * spec.num_classes) as u64,
    }
}

/// Total parameters including patch embedding and both classifier heads.
pub fn count_params(spec: &ArchSpec) -> usize {
    counts(spec).total_params()
}

/// Total multiply-accumulates per image including patch embedding and heads.
pub fn count_flops(spec: &ArchSpec) -> u64 {
    counts(spec).total_flops()
}
