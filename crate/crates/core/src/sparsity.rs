//! 2:4 magnitude sparsity along the reduction axis of block linears.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_linear_weights, Vit};

/// Keep-bits for one weight matrix, laid out like the weight.
pub type Mask24 = Vec<bool>;

/// Masks per weight name.
pub type SparsityMasks = BTreeMap<String, Mask24>;

/// Zeroes the two smallest-magnitude entries of every aligned group of four
/// along the last axis of a row-major matrix with `cols` columns. Ties zero
/// the lower index first.
pub fn apply_2to4(w: &[f32], cols: usize) -> Result<(Vec<f32>, Mask24)> {
    if !cols.is_multiple_of(4) || cols == 0 || !w.len().is_multiple_of(cols) {
        return Err(Error::NotDivisibleBy4(cols));
    }
    let mut out = w.to_vec();
    let mut keep = vec![true; w.len()];
    for (g, chunk) in w.chunks(4).enumerate() {
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| chunk[a].abs().total_cmp(&chunk[b].abs()).then(a.cmp(&b)));
        for &i in &order[..2] {
            out[g * 4 + i] = 0.0;
            keep[g * 4 + i] = false;
        }
    }
    Ok((out, keep))
}

/// First aligned group that breaks the pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation24 {
    pub row: usize,
    pub col: usize,
    pub nonzeros: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report24 {
    pub pattern_ok: bool,
    pub dims_ok: bool,
    pub first_violation: Option<Violation24>,
}

impl Report24 {
    pub fn ok(&self) -> bool {
        self.pattern_ok && self.dims_ok
    }
}

/// Checks that every aligned group of four along the last axis holds at least
/// two zeros, and that the logical `(out, in)` extents are multiples of 16.
pub fn verify_2to4(w: &[f32], cols: usize, logical: (usize, usize)) -> Report24 {
    let dims_ok = logical.0.is_multiple_of(16) && logical.1.is_multiple_of(16) && cols.is_multiple_of(4) && cols > 0;
    let mut first = None;
    if cols.is_multiple_of(4) && cols > 0 {
        for (g, chunk) in w.chunks(4).enumerate() {
            let nz = chunk.iter().filter(|&&x| x != 0.0).count();
            if nz > 2 {
                let flat = g * 4;
                first = Some(Violation24 {
                    row: flat / cols,
                    col: flat % cols,
                    nonzeros: nz,
                });
                break;
            }
        }
    }
    Report24 {
        pattern_ok: first.is_none() && cols.is_multiple_of(4),
        dims_ok,
        first_violation: first,
    }
}

/// Sparsifies every block linear of `vit` in place and returns the masks.
pub fn sparsify_model(vit: &mut Vit) -> Result<SparsityMasks> {
    let mut masks = SparsityMasks::new();
    for (name, _) in block_linear_weights(vit.spec()) {
        let t = vit.get_mut(&name).expect("layout tensor");
        let cols = *t.shape().last().expect("matrix");
        let (data, keep) = apply_2to4(t.data(), cols)?;
        t.data_mut().copy_from_slice(&data);
        masks.insert(name, keep);
    }
    Ok(masks)
}

/// Re-zeroes pruned weights, e.g. after an optimizer step.
pub fn reapply(vit: &mut Vit, masks: &SparsityMasks) -> Result<()> {
    for (name, keep) in masks {
        let t = vit.get_mut(name).ok_or_else(|| {
            Error::Checkpoint(format!("sparsity mask for unknown tensor `{name}`"))
        })?;
        if t.numel() != keep.len() {
            return Err(Error::Checkpoint(format!(
                "sparsity mask for `{name}` has wrong length"
            )));
        }
        t.data_mut().iter_mut().zip(keep).for_each(|(w, &k)| {
            if !k {
                *w = 0.0;
            }
        });
    }
    Ok(())
}

/// Per-matrix verification of a sparsified model.
pub fn verify_model(vit: &Vit) -> Vec<(String, Report24)> {
    block_linear_weights(vit.spec())
        .into_iter()
        .map(|(name, logical)| {
            let t = vit.get(&name).expect("layout tensor");
            let cols = *t.shape().last().expect("matrix");
            let r = verify_2to4(t.data(), cols, logical);
            (name, r)
        })
        .collect()
}
