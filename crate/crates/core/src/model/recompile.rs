//! Physically removes masked channels, heads and neurons.

use super::arch::ArchSpec;
use super::layout::{param_layouts, Axis};
use super::mask::MaskSet;
use super::vit::Vit;
use crate::error::Result;
use crate::tensor::Tensor;

fn live(bits: &[bool]) -> Vec<usize> {
    bits.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect()
}

/// Source index (or zero padding) for each position of a surviving axis.
fn axis_map(
    axis: Axis,
    masks: &MaskSet,
    old_head: Option<usize>,
    old_len: usize,
    new_len: usize,
) -> Vec<Option<usize>> {
    let mut idx: Vec<Option<usize>> = match axis {
        Axis::Free => (0..old_len).map(Some).collect(),
        Axis::Emb => live(&masks.emb).into_iter().map(Some).collect(),
        Axis::Head(b) => {
            let bm = &masks.blocks[b];
            (0..bm.heads.len())
                .filter(|&i| bm.head_alive(i))
                .map(Some)
                .collect()
        }
        Axis::Qk(b) => live(&masks.blocks[b].qk[old_head.expect("head axis")])
            .into_iter()
            .map(Some)
            .collect(),
        Axis::V(b) => live(&masks.blocks[b].v[old_head.expect("head axis")])
            .into_iter()
            .map(Some)
            .collect(),
        Axis::Mlp(b) => live(&masks.blocks[b].mlp).into_iter().map(Some).collect(),
    };
    idx.resize(new_len, None);
    idx
}

/// Dense model equal to `vit` evaluated under `masks`.
///
/// Head-aligned masks give exact extents. Per-head masks pad every alive head
/// to the widest one with zeros, which leaves the outputs unchanged.
pub fn recompile(vit: &Vit, masks: &MaskSet) -> Result<Vit> {
    masks.check_against(vit.spec())?;
    let new_spec: ArchSpec = masks.effective_spec(vit.spec());
    let mut named = Vec::new();
    for nl in param_layouts(&new_spec) {
        let old = vit
            .get(&nl.name)
            .expect("surviving tensor exists in the source");
        let old_shape = old.shape();
        let old_strides = crate::tensor::kernels::strides(old_shape);
        let head_ax = nl.head_axis();
        let maps_for = |oh: Option<usize>| -> Vec<Vec<Option<usize>>> {
            nl.axes
                .iter()
                .enumerate()
                .map(|(ax, &a)| axis_map(a, masks, oh, old_shape[ax], nl.shape[ax]))
                .collect()
        };
        // QK and V maps depend on which old head a new head came from.
        let maps: Vec<Vec<Vec<Option<usize>>>> = match head_ax {
            Some(a) => axis_map(nl.axes[a], masks, None, old_shape[a], nl.shape[a])
                .into_iter()
                .map(|oh| maps_for(Some(oh.expect("alive head"))))
                .collect(),
            None => vec![maps_for(None)],
        };
        let mut data = vec![0f32; nl.numel()];
        nl.for_each_index(|idx, flat| {
            let m = &maps[head_ax.map_or(0, |a| idx[a])];
            let mut off = 0;
            for (ax, &i) in idx.iter().enumerate() {
                match m[ax][i] {
                    Some(src) => off += src * old_strides[ax],
                    None => return,
                }
            }
            data[flat] = old.data()[off];
        });
        named.push((nl.name.clone(), Tensor::new(nl.shape.clone(), data)?));
    }
    Vit::from_tensors(&new_spec, named)
}
