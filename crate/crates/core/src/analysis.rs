//! Attention diversity, run reports and latency-fit statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::LatencyLut;
use crate::model::{count_flops, ArchSpec, BlockDims, MaskSet, Vit};
use crate::pruner::PruneEvent;
use crate::tensor::{Graph, Tensor};

/// `1 − cos(a, b)` clamped to `[0, 2]`; zero when either vector is all zeros.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0)
}

/// Pairwise head distances per block; blocks without attention are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMap {
    /// `[block][head][head]`
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl DiversityMap {
    /// Mean off-diagonal distance per block; `None` for blocks with fewer
    /// than two heads.
    pub fn block_means(&self) -> Vec<Option<f64>> {
        self.blocks
            .iter()
            .map(|m| {
                let h = m.len();
                (h >= 2).then(|| {
                    let s: f64 = (0..h)
                        .flat_map(|i| (0..h).filter(move |&j| j != i).map(move |j| (i, j)))
                        .map(|(i, j)| m[i][j])
                        .sum();
                    s / (h * (h - 1)) as f64
                })
            })
            .collect()
    }
}

/// Batch-averaged attention per head, flattened `[N·N]`; `[block][head]`.
/// Heads that `masks` prunes are reported as zero vectors.
pub fn mean_attention(
    vit: &Vit,
    images: &Tensor,
    masks: Option<&MaskSet>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut g = Graph::new();
    let out = vit.forward(&mut g, images, masks, true)?;
    let bsz = images.shape()[0];
    let nn = vit.spec().num_tokens().pow(2);
    let mut res = Vec::with_capacity(out.attn.len());
    for (b, cap) in out.attn.iter().enumerate() {
        let h = vit.spec().blocks[b].h;
        let mut heads = vec![vec![0f64; nn]; h];
        if let Some(v) = cap {
            let data = g.value(*v);
            for s in 0..bsz {
                for (hi, acc) in heads.iter_mut().enumerate() {
                    let off = (s * h + hi) * nn;
                    acc.iter_mut()
                        .zip(&data[off..off + nn])
                        .for_each(|(a, &x)| *a += x as f64);
                }
            }
            heads.iter_mut().flatten().for_each(|a| *a /= bsz as f64);
            if let Some(m) = masks {
                for (hi, acc) in heads.iter_mut().enumerate() {
                    if !m.blocks[b].head_alive(hi) {
                        acc.iter_mut().for_each(|a| *a = 0.0);
                    }
                }
            }
        }
        res.push(heads);
    }
    Ok(res)
}

pub fn attention_diversity(
    vit: &Vit,
    images: &Tensor,
    masks: Option<&MaskSet>,
) -> Result<DiversityMap> {
    let maps = mean_attention(vit, images, masks)?;
    Ok(DiversityMap {
        blocks: maps
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|a| heads.iter().map(|b| cosine_distance(a, b)).collect())
                    .collect()
            })
            .collect(),
    })
}

/// Dimensions averaged over all blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvgDims {
    pub emb: f64,
    pub h: f64,
    pub qk: f64,
    pub v: f64,
    pub mlp: f64,
}

pub fn avg_dims(emb: usize, blocks: &[BlockDims]) -> AvgDims {
    let n = blocks.len().max(1) as f64;
    let avg = |f: fn(&BlockDims) -> usize| blocks.iter().map(|d| f(d) as f64).sum::<f64>() / n;
    AvgDims {
        emb: emb as f64,
        h: avg(|d| d.h),
        qk: avg(|d| d.qk),
        v: avg(|d| d.v),
        mlp: avg(|d| d.mlp),
    }
}

/// Squared Pearson correlation of paired samples.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy * sxy / (sxx * syy)
}

/// LUT estimate next to a direct cost for one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub estimated: f64,
    pub direct: f64,
}

/// Estimates each spec's latency from the table and compares it with the
/// direct whole-model cost (batch × multiply-accumulates, stem and heads
/// included).
pub fn latency_fit(lut: &LatencyLut, specs: &[ArchSpec]) -> Result<(Vec<FitPoint>, f64)> {
    let pts = specs
        .iter()
        .map(|s| {
            let direct = count_flops(s) as f64 * lut.batch_size as f64;
            Ok(FitPoint {
                estimated: lut.model_latency(s)?,
                direct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (e, d): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p.estimated, p.direct)).unzip();
    let r2 = r_squared(&e, &d);
    Ok((pts, r2))
}

/// One removal as seen in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub index: usize,
    pub step: usize,
    pub group: String,
    pub latency_before: f64,
    pub latency_after: f64,
    pub speedup: f64,
    pub params_live: usize,
    /// Whole-model multiply-accumulates per image of the pruned architecture.
    pub direct_macs: u64,
    pub avg: AvgDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arch: ArchSpec,
    pub initial: AvgDims,
    pub final_avg: AvgDims,
    pub final_emb: usize,
    pub final_blocks: Vec<BlockDims>,
    pub removals: usize,
    pub steps: usize,
    pub trace: Vec<TraceRow>,
    /// Fit of logged latency estimates against direct cost over the run.
    pub latency_r2: f64,
}

/// Summarizes a pruning log; a pure function of the events.
pub fn report(history: &[PruneEvent]) -> Result<RunReport> {
    let (arch, latency_full) = match history.first() {
        Some(PruneEvent::Start {
            arch, latency_full, ..
        }) => (arch.clone(), *latency_full),
        _ => {
            return Err(Error::Events(
                "log does not begin with a start record".into(),
            ))
        }
    };
    let mut trace = Vec::new();
    let mut steps = 0;
    for e in history {
        match e {
            PruneEvent::Removal {
                index,
                step,
                group,
                latency_before,
                latency_after,
                speedup,
                params_live,
                emb,
                blocks,
                ..
            } => {
                let spec = ArchSpec {
                    emb: *emb,
                    blocks: blocks.clone(),
                    ..arch.clone()
                };
                trace.push(TraceRow {
                    index: *index,
                    step: *step,
                    group: group.to_string(),
                    latency_before: *latency_before,
                    latency_after: *latency_after,
                    speedup: *speedup,
                    params_live: *params_live,
                    direct_macs: count_flops(&spec),
                    avg: avg_dims(*emb, blocks),
                });
            }
            PruneEvent::Step { step, .. } => steps = step + 1,
            PruneEvent::End { steps: s, .. } => steps = *s,
            _ => {}
        }
    }
    let (final_emb, final_blocks) = match history.iter().rev().find_map(|e| match e {
        PruneEvent::Removal { emb, blocks, .. } => Some((*emb, blocks.clone())),
        _ => None,
    }) {
        Some(x) => x,
        None => (arch.emb, arch.blocks.clone()),
    };
    let mut est = vec![latency_full];
    let mut direct = vec![count_flops(&arch) as f64];
    for r in &trace {
        est.push(r.latency_after);
        direct.push(r.direct_macs as f64);
    }
    Ok(RunReport {
        initial: avg_dims(arch.emb, &arch.blocks),
        final_avg: avg_dims(final_emb, &final_blocks),
        final_emb,
        final_blocks,
        removals: trace.len(),
        steps,
        trace,
        latency_r2: r_squared(&est, &direct),
        arch,
    })
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes the report as tab-separated files with header rows and returns
/// their paths: `dims.tsv` (per block, before and after), `avg_dims.tsv`,
/// `trace.tsv` and `report.json`.
pub fn write_report(rep: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();

    let p = dir.join("dims.tsv");
    let mut w = tsv_writer(&p)?;
    w.write_record([
        "block",
        "h",
        "qk",
        "v",
        "mlp",
        "h_pruned",
        "qk_pruned",
        "v_pruned",
        "mlp_pruned",
    ])
    .map_err(csv_err)?;
    for (b, (a, f)) in rep.arch.blocks.iter().zip(&rep.final_blocks).enumerate() {
        w.write_record(
            [b, a.h, a.qk, a.v, a.mlp, f.h, f.qk, f.v, f.mlp]
                .iter()
                .map(|x| x.to_string()),
        )
        .map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("avg_dims.tsv");
    let mut w = tsv_writer(&p)?;
    w.write_record(["model", "emb", "h", "qk", "v", "mlp"])
        .map_err(csv_err)?;
    for (name, a) in [("initial", rep.initial), ("pruned", rep.final_avg)] {
        let vals = [a.emb, a.h, a.qk, a.v, a.mlp];
        let mut rec = vec![name.to_string()];
        rec.extend(vals.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("trace.tsv");
    let mut w = tsv_writer(&p)?;
    w.write_record([
        "index",
        "step",
        "group",
        "latency_before",
        "latency_after",
        "speedup",
        "params_live",
        "direct_macs",
        "avg_emb",
        "avg_h",
        "avg_qk",
        "avg_v",
        "avg_mlp",
    ])
    .map_err(csv_err)?;
    for r in &rep.trace {
        w.write_record([
            r.index.to_string(),
            r.step.to_string(),
            r.group.clone(),
            format!("{}", r.latency_before),
            format!("{}", r.latency_after),
            format!("{}", r.speedup),
            r.params_live.to_string(),
            r.direct_macs.to_string(),
            format!("{}", r.avg.emb),
            format!("{}", r.avg.h),
            format!("{}", r.avg.qk),
            format!("{}", r.avg.v),
            format!("{}", r.avg.mlp),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_vec_pretty(rep)?)?;
    paths.push(p);
    Ok(paths)
}

/// Writes one `h × h` distance matrix per block to `diversity.tsv` with
/// columns `block`, `i`, `j`, `distance`.
pub fn write_diversity(map: &DiversityMap, path: &Path) -> Result<()> {
    let mut w = tsv_writer(path)?;
    w.write_record(["block", "i", "j", "distance"])
        .map_err(csv_err)?;
    for (b, m) in map.blocks.iter().enumerate() {
        for (i, row) in m.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                w.write_record([b.to_string(), i.to_string(), j.to_string(), format!("{d}")])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
