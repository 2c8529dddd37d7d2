//! Per-block latency lookup table over (EMB, H, QK, V, MLP).
//!
//! Values live on a regular grid and are queried by 5-axis multilinear
//! interpolation. Whole-model latency is the sum over transformer blocks;
//! patch embedding and classifiers are left out.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_macs, ArchSpec, BlockDims, MaskSet, Vit};
use crate::tensor::{Graph, Tensor};

pub const AXIS_NAMES: [&str; 5] = ["emb", "h", "qk", "v", "mlp"];
const FORMAT_LINE: &str = "vitprune-lut 1";

/// Node positions on each axis. EMB starts at 0; the others start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LutGrid {
    pub emb: Vec<usize>,
    pub h: Vec<usize>,
    pub qk: Vec<usize>,
    pub v: Vec<usize>,
    pub mlp: Vec<usize>,
}

fn with_one(step: usize, max: usize) -> Vec<usize> {
    std::iter::once(1)
        .chain((step..=max).step_by(step))
        .collect()
}

impl LutGrid {
    /// The DEIT-B-scale grid: 3·5·5·5·25 measured points plus the EMB=0 plane.
    pub fn paper() -> Self {
        LutGrid {
            emb: vec![0, 256, 512, 768],
            h: vec![1, 3, 6, 9, 12],
            qk: with_one(16, 64),
            v: with_one(16, 64),
            mlp: with_one(128, 3072),
        }
    }

    /// Scaled-down analogue covering the desk reference model.
    pub fn desk() -> Self {
        LutGrid {
            emb: vec![0, 64, 128, 192],
            h: vec![1, 2, 3, 4],
            qk: with_one(8, 32),
            v: with_one(8, 32),
            mlp: with_one(64, 768),
        }
    }

    pub fn axes(&self) -> [&[usize]; 5] {
        [&self.emb, &self.h, &self.qk, &self.v, &self.mlp]
    }

    pub fn extents(&self) -> [usize; 5] {
        self.axes().map(<[usize]>::len)
    }

    pub fn total_points(&self) -> usize {
        self.extents().iter().product()
    }

    /// Points that are actually profiled, i.e. everything off the EMB=0 plane.
    pub fn measured_points(&self) -> usize {
        let zero = self.emb.iter().filter(|&&e| e == 0).count();
        self.total_points() / self.emb.len() * (self.emb.len() - zero)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ax) in AXIS_NAMES.iter().zip(self.axes()) {
            if ax.len() < 2 {
                return Err(Error::config(
                    format!("lut.grid.{name}"),
                    "needs at least two nodes",
                ));
            }
            if ax.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(
                    format!("lut.grid.{name}"),
                    "nodes must be strictly increasing",
                ));
            }
        }
        if self.emb[0] != 0 {
            return Err(Error::config("lut.grid.emb", "must start at 0"));
        }
        if self.axes()[1..].iter().any(|a| a[0] == 0) {
            return Err(Error::config(
                "lut.grid",
                "h, qk, v and mlp nodes must be >= 1",
            ));
        }
        Ok(())
    }

    /// Grid coordinates of flat index `i` in row-major (emb, h, qk, v, mlp) order.
    pub fn point(&self, mut i: usize) -> [usize; 5] {
        let ext = self.extents();
        let mut idx = [0usize; 5];
        for ax in (0..5).rev() {
            idx[ax] = i % ext[ax];
            i /= ext[ax];
        }
        let axes = self.axes();
        [0, 1, 2, 3, 4].map(|a| axes[a][idx[a]])
    }

    pub fn flat_index(&self, idx: [usize; 5]) -> usize {
        let ext = self.extents();
        idx.iter().zip(ext).fold(0, |acc, (&i, e)| acc * e + i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerKind {
    Analytic,
    WallClock,
}

impl RunnerKind {
    pub fn name(self) -> &'static str {
        match self {
            RunnerKind::Analytic => "analytic",
            RunnerKind::WallClock => "wall_clock",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(RunnerKind::Analytic),
            "wall_clock" => Ok(RunnerKind::WallClock),
            _ => Err(Error::LutFormat(format!("unknown runner `{s}`"))),
        }
    }
}

/// Measures one transformer block at given dimensions.
pub trait BlockRunner {
    fn kind(&self) -> RunnerKind;
    fn run(&mut self, emb: usize, dims: BlockDims) -> Result<f64>;
}

/// Cost model: multiply-accumulates of a block over a batch of token sets.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticRunner {
    pub batch_size: usize,
    pub tokens: usize,
}

impl BlockRunner for AnalyticRunner {
    fn kind(&self) -> RunnerKind {
        RunnerKind::Analytic
    }

    fn run(&mut self, emb: usize, dims: BlockDims) -> Result<f64> {
        Ok((self.batch_size as u64 * block_macs(emb, &dims, self.tokens)) as f64)
    }
}

/// Times a forward pass of one of this crate's own blocks, in seconds.
#[derive(Debug)]
pub struct WallClockRunner {
    pub batch_size: usize,
    pub tokens: usize,
    rng: ChaCha8Rng,
    cached: Option<(usize, BlockDims, Vit, Tensor)>,
}

impl WallClockRunner {
    /// `tokens` must be a square patch count plus the two extra tokens.
    pub fn new(batch_size: usize, tokens: usize, seed: u64) -> Result<Self> {
        let side = ((tokens.saturating_sub(2)) as f64).sqrt().round() as usize;
        if side == 0 || side * side + 2 != tokens {
            return Err(Error::config(
                "lut.tokens",
                "wall-clock runner needs a square patch grid plus 2 tokens",
            ));
        }
        Ok(WallClockRunner {
            batch_size,
            tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached: None,
        })
    }
}

impl BlockRunner for WallClockRunner {
    fn kind(&self) -> RunnerKind {
        RunnerKind::WallClock
    }

    fn run(&mut self, emb: usize, dims: BlockDims) -> Result<f64> {
        let stale = self
            .cached
            .as_ref()
            .is_none_or(|(e, d, ..)| *e != emb || *d != dims);
        if stale {
            let side = ((self.tokens - 2) as f64).sqrt().round() as usize;
            let spec = ArchSpec {
                emb,
                blocks: vec![dims],
                patch_size: 1,
                image_size: side,
                in_channels: 1,
                num_classes: 1,
            };
            let vit = Vit::init(&spec, &mut self.rng)?;
            let n = self.batch_size * self.tokens * emb;
            let x = Tensor::new(
                vec![self.batch_size, self.tokens, emb],
                (0..n).map(|_| self.rng.random::<f32>() - 0.5).collect(),
            )?;
            self.cached = Some((emb, dims, vit, x));
        }
        let (_, _, vit, x) = self.cached.as_ref().expect("populated above");
        let mut g = Graph::new();
        let xv = g.input(x);
        let start = Instant::now();
        let (y, _) = vit.forward_block(&mut g, 0, xv, None, None, false)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(g.value(y));
        Ok(elapsed)
    }
}

/// Median of `xs`; the mean of the two central values for even lengths.
pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyLut {
    pub grid: LutGrid,
    /// One value per grid point in row-major order, EMB=0 plane included.
    pub values: Vec<f64>,
    pub batch_size: usize,
    pub tokens: usize,
    pub runner: RunnerKind,
    pub repeats: usize,
}

/// Populates a table by running every off-plane grid point `repeats` times and
/// keeping the median.
pub fn profile(
    grid: &LutGrid,
    runner: &mut dyn BlockRunner,
    repeats: usize,
    batch_size: usize,
    tokens: usize,
) -> Result<LatencyLut> {
    grid.validate()?;
    if repeats == 0 {
        return Err(Error::config("lut.repeats", "must be >= 1"));
    }
    let mut values = Vec::with_capacity(grid.total_points());
    let mut samples = Vec::with_capacity(repeats);
    for i in 0..grid.total_points() {
        let [emb, h, qk, v, mlp] = grid.point(i);
        if emb == 0 {
            values.push(0.0);
            continue;
        }
        let dims = BlockDims::new(h, qk, v, mlp);
        samples.clear();
        for _ in 0..repeats {
            let t = runner.run(emb, dims).map_err(|e| Error::Runner {
                config: format!("emb={emb} h={h} qk={qk} v={v} mlp={mlp}"),
                reason: e.to_string(),
            })?;
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Runner {
                    config: format!("emb={emb} h={h} qk={qk} v={v} mlp={mlp}"),
                    reason: format!("invalid measurement {t}"),
                });
            }
            samples.push(t);
        }
        values.push(median(&mut samples));
    }
    Ok(LatencyLut {
        grid: grid.clone(),
        values,
        batch_size,
        tokens,
        runner: runner.kind(),
        repeats,
    })
}

/// Lower node index and fractional position of `x` on `axis`. Positions below
/// the first node come out negative, which extends the first cell linearly.
fn locate(axis: &[usize], x: f64, name: &'static str) -> Result<(usize, f64)> {
    let last = *axis.last().expect("validated axis") as f64;
    if !(x >= 0.0 && x <= last) {
        return Err(Error::OutOfBounds {
            axis: name,
            value: x,
        });
    }
    let i = axis
        .partition_point(|&n| (n as f64) <= x)
        .saturating_sub(1)
        .min(axis.len() - 2);
    let (a, b) = (axis[i] as f64, axis[i + 1] as f64);
    Ok((i, (x - a) / (b - a)))
}

impl LatencyLut {
    pub fn value_at(&self, idx: [usize; 5]) -> f64 {
        self.values[self.grid.flat_index(idx)]
    }

    /// Multilinear interpolation at `(emb, h, qk, v, mlp)`. Queries between 0
    /// and the first node on h/qk/v/mlp extend the first cell linearly, so a
    /// component pruned to zero width stops contributing; the result is
    /// floored at 0.
    pub fn interpolate(&self, q: [f64; 5]) -> Result<f64> {
        let axes = self.grid.axes();
        let mut cell = [(0usize, 0f64); 5];
        for a in 0..5 {
            cell[a] = locate(axes[a], q[a], AXIS_NAMES[a])?;
        }
        // Collapse one axis at a time, last axis first.
        let mut vals: Vec<f64> = (0..32)
            .map(|corner: usize| {
                let idx = [0, 1, 2, 3, 4].map(|a| cell[a].0 + ((corner >> (4 - a)) & 1));
                self.value_at(idx)
            })
            .collect();
        for a in (0..5).rev() {
            let t = cell[a].1;
            vals = vals.chunks(2).map(|p| p[0] + t * (p[1] - p[0])).collect();
        }
        Ok(vals[0].max(0.0))
    }

    pub fn block_latency(&self, emb: usize, d: &BlockDims) -> Result<f64> {
        if emb == 0 {
            return Ok(0.0);
        }
        self.interpolate([
            emb as f64,
            d.h as f64,
            d.qk as f64,
            d.v as f64,
            d.mlp as f64,
        ])
    }

    /// Sum of per-block estimates.
    pub fn model_latency(&self, spec: &ArchSpec) -> Result<f64> {
        spec.blocks
            .iter()
            .map(|d| self.block_latency(spec.emb, d))
            .sum()
    }

    pub fn masked_latency(&self, base: &ArchSpec, masks: &MaskSet) -> Result<f64> {
        self.model_latency(&masks.effective_spec(base))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_LINE}");
        for (name, ax) in AXIS_NAMES.iter().zip(self.grid.axes()) {
            let nodes: Vec<String> = ax.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{name} {}", nodes.join(" "));
        }
        let _ = writeln!(s, "batch_size={} tokens={}", self.batch_size, self.tokens);
        let _ = writeln!(s, "runner={} repeats={}", self.runner.name(), self.repeats);
        for (i, v) in self.values.iter().enumerate() {
            let [e, h, qk, vv, m] = self.grid.point(i);
            let _ = writeln!(s, "{e} {h} {qk} {vv} {m} {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::LutFormat(m);
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("missing {what}")));
        if next("format line")?.trim() != FORMAT_LINE {
            return Err(bad("unsupported format line".into()));
        }
        let mut axes: Vec<Vec<usize>> = Vec::new();
        for name in AXIS_NAMES {
            let line = next(name)?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(format!("expected axis `{name}`")));
            }
            let nodes = parts
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|e| bad(format!("axis {name}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            axes.push(nodes);
        }
        let kv = |line: &str| -> Result<Vec<(String, String)>> {
            line.split_whitespace()
                .map(|p| {
                    p.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| bad(format!("expected key=value, got `{p}`")))
                })
                .collect()
        };
        let meta1 = kv(next("batch line")?)?;
        let meta2 = kv(next("runner line")?)?;
        let get = |m: &[(String, String)], k: &str| -> Result<String> {
            m.iter()
                .find(|(kk, _)| kk == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| bad(format!("missing `{k}`")))
        };
        let num = |s: String, k: &str| s.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        let batch_size = num(get(&meta1, "batch_size")?, "batch_size")?;
        let tokens = num(get(&meta1, "tokens")?, "tokens")?;
        let runner = RunnerKind::parse(&get(&meta2, "runner")?)?;
        let repeats = num(get(&meta2, "repeats")?, "repeats")?;
        let mut it = axes.into_iter();
        let mut take = || it.next().expect("five axes");
        let grid = LutGrid {
            emb: take(),
            h: take(),
            qk: take(),
            v: take(),
            mlp: take(),
        };
        grid.validate().map_err(|e| bad(e.to_string()))?;
        let mut values = Vec::with_capacity(grid.total_points());
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 || i >= grid.total_points() {
                return Err(bad(format!("bad record {i}: `{line}`")));
            }
            let expect = grid.point(i);
            for (a, (&want, got)) in expect.iter().zip(&f[..5]).enumerate() {
                if got.parse::<usize>().ok() != Some(want) {
                    return Err(bad(format!(
                        "record {i}: {} is `{got}`, expected {want}",
                        AXIS_NAMES[a]
                    )));
                }
            }
            let v: f64 = f[5].parse().map_err(|e| bad(format!("record {i}: {e}")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("record {i}: latency {v}")));
            }
            values.push(v);
        }
        if values.len() != grid.total_points() {
            return Err(bad(format!(
                "{} records, expected {}",
                values.len(),
                grid.total_points()
            )));
        }
        Ok(LatencyLut {
            grid,
            values,
            batch_size,
            tokens,
            runner,
            repeats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Builds the analytic-cost table for `grid`.
pub fn analytic_lut(grid: &LutGrid, batch_size: usize, tokens: usize) -> Result<LatencyLut> {
    profile(
        grid,
        &mut AnalyticRunner { batch_size, tokens },
        1,
        batch_size,
        tokens,
    )
}
