use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BlockDims};
use crate::error::{Error, Result};

/// Keep-bits for one block. QK and V bits are stored per head so the same
/// structure can describe both head-aligned masks (identical rows) and the
/// concatenated scheme used for comparison (rows may differ).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub heads: Vec<bool>,
    pub qk: Vec<Vec<bool>>,
    pub v: Vec<Vec<bool>>,
    pub mlp: Vec<bool>,
}

/// Binary keep-vectors over every prunable axis of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub emb: Vec<bool>,
    pub blocks: Vec<BlockMask>,
}

fn count(bits: &[bool]) -> usize {
    bits.iter().filter(|&&b| b).count()
}

fn as_f32(bits: impl Iterator<Item = bool>) -> Vec<f32> {
    bits.map(|b| if b { 1.0 } else { 0.0 }).collect()
}

impl BlockMask {
    pub fn full(d: &BlockDims) -> Self {
        BlockMask {
            heads: vec![true; d.h],
            qk: vec![vec![true; d.qk]; d.h],
            v: vec![vec![true; d.v]; d.h],
            mlp: vec![true; d.mlp],
        }
    }

    /// A head contributes output iff its bit is set and it keeps some V width.
    pub fn head_alive(&self, i: usize) -> bool {
        self.heads[i] && self.v[i].iter().any(|&b| b)
    }

    pub fn alive_heads(&self) -> usize {
        (0..self.heads.len())
            .filter(|&i| self.head_alive(i))
            .count()
    }

    pub fn attn_alive(&self) -> bool {
        self.alive_heads() > 0
    }

    pub fn mlp_alive(&self) -> bool {
        self.mlp.iter().any(|&b| b)
    }

    /// Widest live QK among alive heads; this is the width heads are padded to
    /// and the `d_h` used for attention scaling.
    pub fn effective_qk(&self) -> usize {
        (0..self.heads.len())
            .filter(|&i| self.head_alive(i))
            .map(|i| count(&self.qk[i]))
            .max()
            .unwrap_or(0)
    }

    pub fn effective_v(&self) -> usize {
        (0..self.heads.len())
            .filter(|&i| self.head_alive(i))
            .map(|i| count(&self.v[i]))
            .max()
            .unwrap_or(0)
    }

    pub fn effective_dims(&self) -> BlockDims {
        let h = self.alive_heads();
        BlockDims {
            h,
            qk: if h > 0 { self.effective_qk() } else { 0 },
            v: if h > 0 { self.effective_v() } else { 0 },
            mlp: count(&self.mlp),
        }
    }

    /// All heads carry identical QK and V bit rows.
    pub fn is_head_aligned(&self) -> bool {
        self.qk.windows(2).all(|w| w[0] == w[1]) && self.v.windows(2).all(|w| w[0] == w[1])
    }

    /// Flattened `[h·qk]` multiplier for queries and keys.
    pub fn qk_multiplier(&self) -> Vec<f32> {
        as_f32(
            self.qk
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&b| b && self.heads[i])),
        )
    }

    /// Flattened `[h·v]` multiplier for values; zero for dead heads.
    pub fn v_multiplier(&self) -> Vec<f32> {
        as_f32(
            self.v
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&b| b && self.heads[i])),
        )
    }

    pub fn mlp_multiplier(&self) -> Vec<f32> {
        as_f32(self.mlp.iter().copied())
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.heads.len(),
            self.qk.first().map_or(0, Vec::len),
            self.v.first().map_or(0, Vec::len),
            self.mlp.len(),
        )
    }
}

impl MaskSet {
    pub fn full(spec: &ArchSpec) -> Self {
        MaskSet {
            emb: vec![true; spec.emb],
            blocks: spec.blocks.iter().map(BlockMask::full).collect(),
        }
    }

    pub fn live_emb(&self) -> usize {
        count(&self.emb)
    }

    pub fn emb_multiplier(&self) -> Vec<f32> {
        as_f32(self.emb.iter().copied())
    }

    pub fn is_full(&self) -> bool {
        self.emb.iter().all(|&b| b)
            && self.blocks.iter().all(|b| {
                b.heads.iter().all(|&x| x)
                    && b.qk.iter().flatten().all(|&x| x)
                    && b.v.iter().flatten().all(|&x| x)
                    && b.mlp.iter().all(|&x| x)
            })
    }

    pub fn is_head_aligned(&self) -> bool {
        self.blocks.iter().all(BlockMask::is_head_aligned)
    }

    /// Dimensions of the dense model this mask set is equivalent to.
    pub fn effective_spec(&self, base: &ArchSpec) -> ArchSpec {
        ArchSpec {
            emb: self.live_emb(),
            blocks: self.blocks.iter().map(BlockMask::effective_dims).collect(),
            ..base.clone()
        }
    }

    /// Checks the extents against the spec the masks index into.
    pub fn check_against(&self, spec: &ArchSpec) -> Result<()> {
        if self.emb.len() != spec.emb || self.blocks.len() != spec.num_blocks() {
            return Err(Error::Mask(format!(
                "mask covers emb {} / {} blocks, spec has {} / {}",
                self.emb.len(),
                self.blocks.len(),
                spec.emb,
                spec.num_blocks()
            )));
        }
        for (i, (bm, d)) in self.blocks.iter().zip(&spec.blocks).enumerate() {
            let (h, qk, v, mlp) = bm.dims();
            let rows_ok =
                bm.qk.iter().all(|r| r.len() == d.qk) && bm.v.iter().all(|r| r.len() == d.v);
            let qk_ok = d.h == 0 || qk == d.qk;
            let v_ok = d.h == 0 || v == d.v;
            if h != d.h
                || !qk_ok
                || !v_ok
                || mlp != d.mlp
                || !rows_ok
                || bm.qk.len() != h
                || bm.v.len() != h
            {
                return Err(Error::Mask(format!(
                    "block {i} mask extents do not match {d:?}"
                )));
            }
        }
        if self.live_emb() == 0 {
            return Err(Error::Mask("every EMB channel is masked".into()));
        }
        Ok(())
    }

    /// True when no bit that is clear in `earlier` is set here.
    pub fn is_monotone_after(&self, earlier: &MaskSet) -> bool {
        fn le(a: &[bool], b: &[bool]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y)
        }
        le(&self.emb, &earlier.emb)
            && self.blocks.len() == earlier.blocks.len()
            && self.blocks.iter().zip(&earlier.blocks).all(|(n, o)| {
                le(&n.heads, &o.heads)
                    && le(&n.mlp, &o.mlp)
                    && n.qk.iter().zip(&o.qk).all(|(a, b)| le(a, b))
                    && n.v.iter().zip(&o.v).all(|(a, b)| le(a, b))
            })
    }
}
