//! Architecture specs, keep-masks, the ViT itself and dense recompilation.

mod arch;
mod counts;
mod layout;
mod mask;
mod recompile;
mod vit;

pub use arch::{ArchSpec, BlockDims};
pub use counts::{block_macs, block_params, count_flops, count_params, counts, ModelCounts};
pub use layout::{
    block_linear_weights, live_param_count, param_layouts, Axis, Branch, ParamLayout,
};
pub use mask::{BlockMask, MaskSet};
pub use recompile::recompile;
pub use vit::{patchify, Vit, VitOutput, LN_EPS};
