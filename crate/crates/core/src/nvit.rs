//! Block-dimension rule that redistributes parameters toward the middle of
//! the network, and checks of the same trends on pruned models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_params, ArchSpec, BlockDims};
use crate::pruner::PruneEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvitRule {
    pub emb: usize,
    pub num_blocks: usize,
    /// Scale factor per block; first and last entries are ignored.
    pub epsilon: Vec<f64>,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

/// Indices of the wide middle section: the middle half of the intermediate
/// blocks, rounded inward. For 12 blocks this is blocks 3..=8.
pub fn middle_blocks(num_blocks: usize) -> std::ops::RangeInclusive<usize> {
    let q = num_blocks.div_ceil(4);
    if num_blocks < 3 || q > num_blocks - 1 - q {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    q..=num_blocks - 1 - q
}

impl NvitRule {
    /// ε = 2 on the middle blocks and 1 elsewhere, at ImageNet image settings.
    pub fn new(emb: usize, num_blocks: usize) -> Self {
        let mid = middle_blocks(num_blocks);
        NvitRule {
            emb,
            num_blocks,
            epsilon: (0..num_blocks)
                .map(|b| if mid.contains(&b) { 2.0 } else { 1.0 })
                .collect(),
            patch_size: 16,
            image_size: 224,
            in_channels: 3,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb == 0 {
            return Err(Error::config("nvit.emb", "must be > 0"));
        }
        if self.num_blocks == 0 {
            return Err(Error::config("nvit.num_blocks", "must be > 0"));
        }
        if self.epsilon.len() != self.num_blocks {
            return Err(Error::config(
                "nvit.epsilon",
                format!(
                    "{} values for {} blocks",
                    self.epsilon.len(),
                    self.num_blocks
                ),
            ));
        }
        if self.epsilon.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::config(
                "nvit.epsilon",
                "values must be finite and > 0",
            ));
        }
        Ok(())
    }
}

/// Nearest multiple of `step`, ties rounding up, at least `min`.
pub fn round_to(x: f64, step: usize, min: usize) -> usize {
    let s = step as f64;
    (((x / s) + 0.5).floor() as usize * step).max(min)
}

/// Dimensions of one block under the rule.
pub fn block_dims(emb: usize, eps: f64, end_block: bool) -> BlockDims {
    let e = emb as f64;
    if end_block {
        BlockDims::new(10, round_to(e / 10.0, 8, 8), 64, 3 * emb)
    } else {
        BlockDims::new(
            round_to(eps * e / 100.0, 2, 2),
            round_to(eps * e / 20.0, 8, 8),
            64,
            (eps * e * 3.0).round() as usize,
        )
    }
}

pub fn generate(rule: &NvitRule) -> Result<ArchSpec> {
    rule.validate()?;
    let n = rule.num_blocks;
    let blocks = (0..n)
        .map(|b| block_dims(rule.emb, rule.epsilon[b], b == 0 || b == n - 1))
        .collect();
    let spec = ArchSpec {
        emb: rule.emb,
        blocks,
        patch_size: rule.patch_size,
        image_size: rule.image_size,
        in_channels: rule.in_channels,
        num_classes: rule.num_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// The trend statements evaluated on one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendChecks {
    /// Mean over the middle blocks exceeds the mean over the other
    /// intermediate blocks.
    pub h_middle_gt_ends: bool,
    pub qk_middle_gt_ends: bool,
    pub mlp_middle_gt_ends: bool,
    /// Coefficient of variation of V across attention blocks is within the
    /// threshold.
    pub v_uniform: bool,
    /// First and last blocks hold more parameters than their neighbors.
    pub first_last_gt_neighbors: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub emb: usize,
    pub blocks: Vec<BlockDims>,
    pub params: Vec<usize>,
    pub v_cv: f64,
    pub checks: TrendChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub generated: TrendCurve,
    pub pruned: TrendCurve,
}

pub const V_CV_THRESHOLD: f64 = 0.25;

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn trend_curve(emb: usize, blocks: &[BlockDims]) -> TrendCurve {
    let n = blocks.len();
    let params: Vec<usize> = blocks.iter().map(|d| block_params(emb, d)).collect();
    let mid = middle_blocks(n);
    let gt = |f: &dyn Fn(&BlockDims) -> usize| {
        let m = mean(
            blocks
                .iter()
                .enumerate()
                .filter(|(b, _)| mid.contains(b))
                .map(|(_, d)| f(d) as f64),
        );
        let e = mean(
            blocks
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != 0 && *b + 1 != n && !mid.contains(b))
                .map(|(_, d)| f(d) as f64),
        );
        matches!((m, e), (Some(m), Some(e)) if m > e)
    };
    let vs: Vec<f64> = blocks
        .iter()
        .filter(|d| d.h > 0)
        .map(|d| d.v as f64)
        .collect();
    let v_cv = match mean(vs.iter().copied()) {
        Some(m) if m > 0.0 => {
            let var = vs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vs.len() as f64;
            var.sqrt() / m
        }
        _ => 0.0,
    };
    let first_last = n >= 3 && params[0] > params[1] && params[n - 1] > params[n - 2];
    TrendCurve {
        emb,
        blocks: blocks.to_vec(),
        params,
        v_cv,
        checks: TrendChecks {
            h_middle_gt_ends: gt(&|d| d.h),
            qk_middle_gt_ends: gt(&|d| d.qk),
            mlp_middle_gt_ends: gt(&|d| d.mlp),
            v_uniform: !vs.is_empty() && v_cv <= V_CV_THRESHOLD,
            first_last_gt_neighbors: first_last,
        },
    }
}

/// Trend curves of `generated` next to the final architecture of a pruning log.
pub fn compare_trend(generated: &ArchSpec, history: &[PruneEvent]) -> Result<TrendReport> {
    let last = history.iter().rev().find_map(|e| match e {
        PruneEvent::Removal { emb, blocks, .. } => Some((*emb, blocks.clone())),
        _ => None,
    });
    let (emb, blocks) = match (last, history.first()) {
        (Some(x), _) => x,
        (None, Some(PruneEvent::Start { arch, .. })) => (arch.emb, arch.blocks.clone()),
        _ => {
            return Err(Error::Events(
                "log does not begin with a start record".into(),
            ))
        }
    };
    Ok(TrendReport {
        generated: trend_curve(generated.emb, &generated.blocks),
        pruned: trend_curve(emb, &blocks),
    })
}
