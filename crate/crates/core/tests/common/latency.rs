//! Oracles for the latency table: the explicit corner sum and a layer-by-layer
//! cost count.

use rand::Rng;
use vitprune::lut::{analytic_lut, LatencyLut, LutGrid};
use vitprune::model::{ArchSpec, BlockDims};

use super::rng;

/// Desk grid with values drawn uniformly from [0, 1) off the EMB=0 plane.
pub fn random_lut(seed: u64) -> LatencyLut {
    let mut lut = analytic_lut(&LutGrid::desk(), 1, 18).unwrap();
    let mut r = rng(seed);
    for i in 0..lut.values.len() {
        if lut.grid.point(i)[0] != 0 {
            lut.values[i] = r.random::<f64>();
        }
    }
    lut
}

/// Explicit sum over the 32 cell corners of `Π_a (t_a or 1 − t_a) · value`,
/// for queries inside the grid.
pub fn corner_sum(lut: &LatencyLut, q: [f64; 5]) -> f64 {
    let axes = lut.grid.axes();
    let mut lo = [0usize; 5];
    let mut t = [0f64; 5];
    for a in 0..5 {
        let ax = axes[a];
        let mut i = 0;
        while i + 2 < ax.len() && q[a] >= ax[i + 1] as f64 {
            i += 1;
        }
        lo[a] = i;
        t[a] = (q[a] - ax[i] as f64) / (ax[i + 1] - ax[i]) as f64;
    }
    let mut total = 0.0;
    for corner in 0..32 {
        let mut w = 1.0;
        let mut idx = [0usize; 5];
        for a in 0..5 {
            let up = corner >> a & 1 == 1;
            idx[a] = lo[a] + up as usize;
            w *= if up { t[a] } else { 1.0 - t[a] };
        }
        total += w * lut.value_at(idx);
    }
    total
}

pub fn random_query(lut: &LatencyLut, r: &mut impl Rng) -> [f64; 5] {
    let axes = lut.grid.axes();
    [0, 1, 2, 3, 4].map(|a| {
        let ax = axes[a];
        r.random_range(ax[0] as f64..=*ax.last().unwrap() as f64)
    })
}

/// Whole-model multiply-accumulates for `batch` images, counted layer by
/// layer: patch projection, per-block q/k/v/proj, attention products, MLP,
/// and the two classifiers.
pub fn direct_cost(spec: &ArchSpec, batch: usize) -> f64 {
    let side = spec.image_size / spec.patch_size;
    let patches = side * side;
    let n = patches + 2;
    let e = spec.emb;
    let mut macs = patches * spec.in_channels * spec.patch_size * spec.patch_size * e;
    for d in &spec.blocks {
        let q = n * e * d.h * d.qk;
        let k = q;
        let v = n * e * d.h * d.v;
        let proj = n * d.h * d.v * e;
        let scores = d.h * n * n * d.qk;
        let mix = d.h * n * n * d.v;
        let mlp = 2 * n * e * d.mlp;
        macs += q + k + v + proj + scores + mix + mlp;
    }
    macs += 2 * e * spec.num_classes;
    (macs * batch) as f64
}

pub fn random_desk_spec(r: &mut impl Rng) -> ArchSpec {
    let mut spec = ArchSpec::desk(8);
    spec.emb = r.random_range(1..=192);
    for b in &mut spec.blocks {
        let h = r.random_range(0..=4);
        *b = BlockDims::new(
            h,
            r.random_range(1..=32),
            r.random_range(1..=32),
            r.random_range(0..=768),
        );
    }
    spec
}
