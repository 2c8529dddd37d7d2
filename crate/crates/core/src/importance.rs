//! Structural groups, Taylor importance and the latency-aware ledger.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::LatencyLut;
use crate::model::{ArchSpec, Axis, MaskSet, ParamLayout, Vit};

/// Prunable dimension. The derived order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GroupKind {
    Emb,
    H,
    Qk,
    V,
    Mlp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        GroupKind::Emb,
        GroupKind::H,
        GroupKind::Qk,
        GroupKind::V,
        GroupKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Emb => "EMB",
            GroupKind::H => "H",
            GroupKind::Qk => "QK",
            GroupKind::V => "V",
            GroupKind::Mlp => "MLP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        GroupKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

/// How QK and V slices relate across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// A QK/V slice is removed from every head of the block at once, and heads
    /// are removed explicitly as H groups.
    #[default]
    HeadAligned,
    /// Each head's QK/V slices are independent groups; there are no H groups.
    Concatenated,
}

/// One removable slice. `block` is `None` for EMB; `head` is set only for
/// per-head QK/V groups in concatenated mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PruneGroup {
    pub kind: GroupKind,
    pub block: Option<usize>,
    pub head: Option<usize>,
    pub slice: usize,
}

impl fmt::Display for PruneGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.name())?;
        if let Some(b) = self.block {
            write!(f, "@b{b}")?;
        }
        if let Some(h) = self.head {
            write!(f, "h{h}")?;
        }
        write!(f, "[{}]", self.slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupSizes {
    pub emb: usize,
    pub h: usize,
    pub qk: usize,
    pub v: usize,
    pub mlp: usize,
}

impl Default for GroupSizes {
    fn default() -> Self {
        GroupSizes {
            emb: 16,
            h: 2,
            qk: 8,
            v: 8,
            mlp: 16,
        }
    }
}

impl GroupSizes {
    pub fn of(&self, kind: GroupKind) -> usize {
        match kind {
            GroupKind::Emb => self.emb,
            GroupKind::H => self.h,
            GroupKind::Qk => self.qk,
            GroupKind::V => self.v,
            GroupKind::Mlp => self.mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in GroupKind::ALL {
            if self.of(k) == 0 {
                return Err(Error::config(
                    format!("prune.schedule.group_sizes.{}", k.name().to_lowercase()),
                    "must be >= 1",
                ));
            }
        }
        Ok(())
    }
}

/// Index range of `slice` on an axis of length `len`.
pub fn slice_range(slice: usize, size: usize, len: usize) -> std::ops::Range<usize> {
    (slice * size).min(len)..((slice + 1) * size).min(len)
}

/// Every group of `spec`, in tie-break order.
pub fn enumerate_groups(
    spec: &ArchSpec,
    sizes: &GroupSizes,
    mode: AlignmentMode,
) -> Vec<PruneGroup> {
    let n_slices = |len: usize, size: usize| len.div_ceil(size);
    let mut out = Vec::new();
    let g = |kind, block, head, slice| PruneGroup {
        kind,
        block,
        head,
        slice,
    };
    for s in 0..n_slices(spec.emb, sizes.emb) {
        out.push(g(GroupKind::Emb, None, None, s));
    }
    for (b, d) in spec.blocks.iter().enumerate() {
        if d.has_attn() {
            match mode {
                AlignmentMode::HeadAligned => {
                    for s in 0..n_slices(d.h, sizes.h) {
                        out.push(g(GroupKind::H, Some(b), None, s));
                    }
                    for s in 0..n_slices(d.qk, sizes.qk) {
                        out.push(g(GroupKind::Qk, Some(b), None, s));
                    }
                    for s in 0..n_slices(d.v, sizes.v) {
                        out.push(g(GroupKind::V, Some(b), None, s));
                    }
                }
                AlignmentMode::Concatenated => {
                    for h in 0..d.h {
                        for s in 0..n_slices(d.qk, sizes.qk) {
                            out.push(g(GroupKind::Qk, Some(b), Some(h), s));
                        }
                    }
                    for h in 0..d.h {
                        for s in 0..n_slices(d.v, sizes.v) {
                            out.push(g(GroupKind::V, Some(b), Some(h), s));
                        }
                    }
                }
            }
        }
        if d.has_mlp() {
            for s in 0..n_slices(d.mlp, sizes.mlp) {
                out.push(g(GroupKind::Mlp, Some(b), None, s));
            }
        }
    }
    out.sort();
    out
}

/// The keep-bits a group controls, as mutable references.
fn group_bits<'m>(
    group: &PruneGroup,
    sizes: &GroupSizes,
    masks: &'m mut MaskSet,
) -> Vec<&'m mut bool> {
    let size = sizes.of(group.kind);
    let range = |len: usize| slice_range(group.slice, size, len);
    match group.kind {
        GroupKind::Emb => {
            let r = range(masks.emb.len());
            masks.emb[r].iter_mut().collect()
        }
        kind => {
            let bm = &mut masks.blocks[group.block.expect("block group")];
            match kind {
                GroupKind::H => {
                    let r = range(bm.heads.len());
                    bm.heads[r].iter_mut().collect()
                }
                GroupKind::Mlp => {
                    let r = range(bm.mlp.len());
                    bm.mlp[r].iter_mut().collect()
                }
                GroupKind::Qk | GroupKind::V => {
                    let rows = if kind == GroupKind::Qk {
                        &mut bm.qk
                    } else {
                        &mut bm.v
                    };
                    let width = rows.first().map_or(0, Vec::len);
                    let r = range(width);
                    rows.iter_mut()
                        .enumerate()
                        .filter(|(h, _)| group.head.is_none_or(|gh| gh == *h))
                        .flat_map(|(_, row)| row[r.clone()].iter_mut())
                        .collect()
                }
                GroupKind::Emb => unreachable!(),
            }
        }
    }
}

/// Whether any bit of the group is still set.
pub fn is_active(group: &PruneGroup, sizes: &GroupSizes, masks: &MaskSet) -> bool {
    let mut m = masks.clone();
    group_bits(group, sizes, &mut m).into_iter().any(|b| *b)
}

/// Clears the group's bits.
pub fn remove_group(group: &PruneGroup, sizes: &GroupSizes, masks: &mut MaskSet) {
    for b in group_bits(group, sizes, masks) {
        *b = false;
    }
}

/// Masks after removing `group`, leaving `masks` untouched.
pub fn without(group: &PruneGroup, sizes: &GroupSizes, masks: &MaskSet) -> MaskSet {
    let mut m = masks.clone();
    remove_group(group, sizes, &mut m);
    m
}

/// Whether position `idx` of a tensor falls inside `group`'s slice.
fn in_slice(layout: &ParamLayout, idx: &[usize], group: &PruneGroup, size: usize) -> bool {
    let head = layout.head_axis().map(|a| idx[a]);
    let r = |i: usize| i / size == group.slice;
    layout
        .axes
        .iter()
        .zip(idx)
        .any(|(axis, &i)| match (*axis, group.kind) {
            (Axis::Emb, GroupKind::Emb) => r(i),
            (Axis::Head(b), GroupKind::H) => group.block == Some(b) && r(i),
            (Axis::Qk(b), GroupKind::Qk) | (Axis::V(b), GroupKind::V) => {
                group.block == Some(b) && r(i) && group.head.is_none_or(|h| Some(h) == head)
            }
            (Axis::Mlp(b), GroupKind::Mlp) => group.block == Some(b) && r(i),
            _ => false,
        })
}

/// Weight coordinates `(tensor index, flat offset)` indexed by the group's
/// slice, live or not.
pub fn slice_coords(vit: &Vit, group: &PruneGroup, sizes: &GroupSizes) -> Vec<(usize, usize)> {
    let size = sizes.of(group.kind);
    let mut out = Vec::new();
    for (ti, l) in vit.layouts().iter().enumerate() {
        l.for_each_index(|idx, flat| {
            if in_slice(l, idx, group, size) {
                out.push((ti, flat));
            }
        });
    }
    out
}

/// Live coordinates that disappear when `group` is removed from `masks`:
/// the live part of its slice plus every tensor of a branch the removal empties.
pub fn group_coords(
    vit: &Vit,
    group: &PruneGroup,
    sizes: &GroupSizes,
    masks: &MaskSet,
) -> Vec<(usize, usize)> {
    let after = without(group, sizes, masks);
    let mut out = Vec::new();
    for (ti, l) in vit.layouts().iter().enumerate() {
        l.for_each_index(|idx, flat| {
            if l.is_live(idx, masks) && !l.is_live(idx, &after) {
                out.push((ti, flat));
            }
        });
    }
    out
}

/// Per-axis sums of `g ⊙ w` over every other axis.
#[derive(Debug, Clone, Default)]
pub struct AxisSums {
    pub emb: Vec<f64>,
    /// `[block][head]`
    pub head: Vec<Vec<f64>>,
    /// `[block][head][qk]`
    pub qk: Vec<Vec<Vec<f64>>>,
    /// `[block][head][v]`
    pub v: Vec<Vec<Vec<f64>>>,
    /// `[block][mlp]`
    pub mlp: Vec<Vec<f64>>,
}

impl AxisSums {
    /// Reduces the gradients currently held by `vit`'s tensors.
    pub fn from_model(vit: &Vit) -> Result<Self> {
        let spec = vit.spec();
        let mut s = AxisSums {
            emb: vec![0.0; spec.emb],
            head: spec.blocks.iter().map(|d| vec![0.0; d.h]).collect(),
            qk: spec
                .blocks
                .iter()
                .map(|d| vec![vec![0.0; d.qk]; d.h])
                .collect(),
            v: spec
                .blocks
                .iter()
                .map(|d| vec![vec![0.0; d.v]; d.h])
                .collect(),
            mlp: spec.blocks.iter().map(|d| vec![0.0; d.mlp]).collect(),
        };
        for (l, t) in vit.params() {
            if l.axes.iter().all(|a| *a == Axis::Free) {
                continue;
            }
            let g = t.grad().ok_or_else(|| Error::MissingGrad(l.name.clone()))?;
            let w = t.data();
            let head_ax = l.head_axis();
            l.for_each_index(|idx, flat| {
                let p = g[flat] as f64 * w[flat] as f64;
                if p == 0.0 {
                    return;
                }
                let head = head_ax.map(|a| idx[a]);
                for (axis, &i) in l.axes.iter().zip(idx) {
                    match *axis {
                        Axis::Free => {}
                        Axis::Emb => s.emb[i] += p,
                        Axis::Head(b) => s.head[b][i] += p,
                        Axis::Qk(b) => s.qk[b][head.expect("head axis")][i] += p,
                        Axis::V(b) => s.v[b][head.expect("head axis")][i] += p,
                        Axis::Mlp(b) => s.mlp[b][i] += p,
                    }
                }
            });
        }
        Ok(s)
    }

    /// `Σ g·w` over the group's slice.
    pub fn group_sum(&self, group: &PruneGroup, sizes: &GroupSizes) -> f64 {
        let size = sizes.of(group.kind);
        let sum_range = |v: &[f64]| {
            v[slice_range(group.slice, size, v.len())]
                .iter()
                .sum::<f64>()
        };
        match group.kind {
            GroupKind::Emb => sum_range(&self.emb),
            GroupKind::H => sum_range(&self.head[group.block.expect("block")]),
            GroupKind::Mlp => sum_range(&self.mlp[group.block.expect("block")]),
            GroupKind::Qk | GroupKind::V => {
                let rows = if group.kind == GroupKind::Qk {
                    &self.qk
                } else {
                    &self.v
                };
                rows[group.block.expect("block")]
                    .iter()
                    .enumerate()
                    .filter(|(h, _)| group.head.is_none_or(|gh| gh == *h))
                    .map(|(_, r)| sum_range(r))
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Divisors {
    /// `None` divides EMB scores by the number of blocks.
    pub emb: Option<f64>,
    pub h: f64,
}

impl Default for Divisors {
    fn default() -> Self {
        Divisors { emb: None, h: 6.0 }
    }
}

impl Divisors {
    pub fn of(&self, kind: GroupKind, num_blocks: usize) -> f64 {
        match kind {
            GroupKind::Emb => self.emb.unwrap_or(num_blocks as f64),
            GroupKind::H => self.h,
            _ => 1.0,
        }
    }
}

/// `(Σ g·w)² / divisor` for one group.
pub fn group_taylor(
    sums: &AxisSums,
    group: &PruneGroup,
    sizes: &GroupSizes,
    div: &Divisors,
    num_blocks: usize,
) -> f64 {
    let s = sums.group_sum(group, sizes);
    s * s / div.of(group.kind, num_blocks)
}

/// `(L(W | w_S = 0) − L(W))²`, zeroing the group's slice in place and
/// restoring it before returning.
pub fn exact_perturbation(
    vit: &mut Vit,
    group: &PruneGroup,
    sizes: &GroupSizes,
    loss: &mut dyn FnMut(&Vit) -> Result<f64>,
) -> Result<f64> {
    let base = loss(vit)?;
    let coords = slice_coords(vit, group, sizes);
    let saved: Vec<f32> = coords
        .iter()
        .map(|&(t, i)| vit.tensors()[t].data()[i])
        .collect();
    for &(t, i) in &coords {
        vit.tensors_mut()[t].data_mut()[i] = 0.0;
    }
    let perturbed = loss(vit);
    for (&(t, i), &w) in coords.iter().zip(&saved) {
        vit.tensors_mut()[t].data_mut()[i] = w;
    }
    let d = perturbed? - base;
    Ok(d * d)
}

/// Estimated latency drop from removing `group` from `masks`.
pub fn latency_saving(
    lut: &LatencyLut,
    spec: &ArchSpec,
    group: &PruneGroup,
    sizes: &GroupSizes,
    masks: &MaskSet,
) -> Result<f64> {
    let after = without(group, sizes, masks);
    Ok(lut.masked_latency(spec, masks)? - lut.masked_latency(spec, &after)?)
}

/// Per-block latencies under the current masks, so savings only re-query
/// the blocks a group touches.
#[derive(Debug, Clone)]
pub struct LatencyCache {
    blocks: Vec<f64>,
}

impl LatencyCache {
    pub fn new(lut: &LatencyLut, spec: &ArchSpec, masks: &MaskSet) -> Result<Self> {
        let eff = masks.effective_spec(spec);
        let blocks = eff
            .blocks
            .iter()
            .map(|d| lut.block_latency(eff.emb, d))
            .collect::<Result<_>>()?;
        Ok(LatencyCache { blocks })
    }

    pub fn total(&self) -> f64 {
        self.blocks.iter().sum()
    }

    pub fn saving(
        &self,
        lut: &LatencyLut,
        spec: &ArchSpec,
        group: &PruneGroup,
        sizes: &GroupSizes,
        masks: &MaskSet,
    ) -> Result<f64> {
        let after = without(group, sizes, masks);
        let eff = after.effective_spec(spec);
        match group.block {
            None => {
                let new: f64 = eff
                    .blocks
                    .iter()
                    .map(|d| lut.block_latency(eff.emb, d))
                    .sum::<Result<f64>>()?;
                Ok(self.total() - new)
            }
            Some(b) => Ok(self.blocks[b] - lut.block_latency(eff.emb, &eff.blocks[b])?),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub smoothed: f64,
    pub saving: f64,
}

/// One candidate as shown in removal events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub group: PruneGroup,
    pub taylor: f64,
    pub saving: f64,
    pub combined: f64,
}

/// Smoothed Taylor scores and latency savings of the active groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceLedger {
    pub decay: f64,
    /// Latency weight; `None` until auto-calibrated.
    pub eta: Option<f64>,
    pub divisors: Divisors,
    pub entries: BTreeMap<PruneGroup, LedgerEntry>,
    pub removed: Vec<PruneGroup>,
    pub updates: u64,
}

impl ImportanceLedger {
    pub fn new(
        groups: impl IntoIterator<Item = PruneGroup>,
        decay: f64,
        eta: Option<f64>,
        divisors: Divisors,
    ) -> Self {
        ImportanceLedger {
            decay,
            eta,
            divisors,
            entries: groups
                .into_iter()
                .map(|g| (g, LedgerEntry::default()))
                .collect(),
            removed: Vec::new(),
            updates: 0,
        }
    }

    /// `s ← d·s + (1 − d)·x` for every group with a new score.
    pub fn accumulate(&mut self, scores: impl IntoIterator<Item = (PruneGroup, f64)>) {
        let d = self.decay;
        for (g, x) in scores {
            if let Some(e) = self.entries.get_mut(&g) {
                e.smoothed = d * e.smoothed + (1.0 - d) * x;
            }
        }
        self.updates += 1;
    }

    pub fn set_saving(&mut self, g: &PruneGroup, saving: f64) {
        if let Some(e) = self.entries.get_mut(g) {
            e.saving = saving;
        }
    }

    pub fn eta_or_zero(&self) -> f64 {
        self.eta.unwrap_or(0.0)
    }

    /// `smoothed − η·saving`
    pub fn combined(&self, g: &PruneGroup) -> Option<f64> {
        self.entries
            .get(g)
            .map(|e| e.smoothed - self.eta_or_zero() * e.saving)
    }

    pub fn row(&self, g: &PruneGroup) -> Option<LedgerRow> {
        self.entries.get(g).map(|e| LedgerRow {
            group: *g,
            taylor: e.smoothed,
            saving: e.saving,
            combined: e.smoothed - self.eta_or_zero() * e.saving,
        })
    }

    /// Sets η so the median penalty is `ratio` times the median smoothed
    /// Taylor score over `groups`; zero when the median saving is zero.
    pub fn calibrate_eta(&mut self, groups: &[PruneGroup], ratio: f64) -> f64 {
        let mut taylor: Vec<f64> = groups
            .iter()
            .filter_map(|g| self.entries.get(g))
            .map(|e| e.smoothed)
            .collect();
        let mut saving: Vec<f64> = groups
            .iter()
            .filter_map(|g| self.entries.get(g))
            .map(|e| e.saving)
            .collect();
        let eta = if taylor.is_empty() {
            0.0
        } else {
            let mt = crate::lut::median(&mut taylor);
            let ms = crate::lut::median(&mut saving);
            if ms > 0.0 {
                ratio * mt / ms
            } else {
                0.0
            }
        };
        self.eta = Some(eta);
        eta
    }

    pub fn retire(&mut self, g: &PruneGroup) {
        if self.entries.remove(g).is_some() {
            self.removed.push(*g);
        }
    }
}
