use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-block dimensions. `h == 0` or `mlp == 0` denote a branch that has been
/// pruned away entirely; the block then passes that branch's residual through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDims {
    pub h: usize,
    pub qk: usize,
    pub v: usize,
    pub mlp: usize,
}

impl BlockDims {
    pub const fn new(h: usize, qk: usize, v: usize, mlp: usize) -> Self {
        BlockDims { h, qk, v, mlp }
    }

    pub fn has_attn(&self) -> bool {
        self.h > 0
    }

    pub fn has_mlp(&self) -> bool {
        self.mlp > 0
    }
}

/// Dimension table of one ViT instance: a shared embedding width plus
/// independent per-block head count, QK width, V width and MLP width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub emb: usize,
    pub blocks: Vec<BlockDims>,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    /// A uniform DEIT-style spec.
    pub fn uniform(
        emb: usize,
        depth: usize,
        dims: BlockDims,
        image_size: usize,
        patch_size: usize,
        num_classes: usize,
    ) -> Self {
        ArchSpec {
            emb,
            blocks: vec![dims; depth],
            patch_size,
            image_size,
            in_channels: 3,
            num_classes,
        }
    }

    pub fn deit_base() -> Self {
        Self::uniform(768, 12, BlockDims::new(12, 64, 64, 3072), 224, 16, 1000)
    }

    pub fn deit_small() -> Self {
        Self::uniform(384, 12, BlockDims::new(6, 64, 64, 1536), 224, 16, 1000)
    }

    pub fn deit_tiny() -> Self {
        Self::uniform(192, 12, BlockDims::new(3, 64, 64, 768), 224, 16, 1000)
    }

    /// Desk-scale reference model: 32px images in 8px patches (16 + 2 tokens),
    /// EMB 64, four blocks of 4 heads with QK = V = 16 and MLP 128.
    pub fn desk(num_classes: usize) -> Self {
        Self::uniform(64, 4, BlockDims::new(4, 16, 16, 128), 32, 8, num_classes)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Token count: patches plus class and distillation tokens.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Arch(m));
        if self.emb == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return bad("emb, num_classes and in_channels must be positive".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.h > 0 && (b.qk == 0 || b.v == 0) {
                return bad(format!("block {i}: heads need qk >= 1 and v >= 1"));
            }
        }
        Ok(())
    }

    /// Every linear input/output extent is a multiple of 16, as sparse tensor
    /// cores require.
    pub fn is_ampere_legal(&self) -> bool {
        self.emb.is_multiple_of(16)
            && self
                .blocks
                .iter()
                .all(|b| b.mlp % 16 == 0 && (b.qk * b.h) % 16 == 0 && (b.v * b.h) % 16 == 0)
    }
}
