//! Oracles shared by the integration tests: 64-bit reference operators, an
//! independent 64-bit forward pass of the masked ViT, and central
//! differences.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune::model::{ArchSpec, BlockDims, MaskSet, Vit};
use vitprune::tensor::Tensor;

mod harness;
mod latency;
mod ops;
mod sparse;
#[allow(unused_imports)]
pub use harness::*;
#[allow(unused_imports)]
pub use latency::*;
#[allow(unused_imports)]
pub use ops::*;
#[allow(unused_imports)]
pub use sparse::*;

pub const FD_EPS: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for relative errors, so coordinates whose gradient is
/// numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

/// `(f(x + ε e_i) − f(x − ε e_i)) / 2ε`, restoring `x[i]` afterwards.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, eps: f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + eps;
    let up = f(x);
    x[i] = x0 - eps;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * eps)
}

// ---------------------------------------------------------------------------
// 64-bit operators

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// `x[m×k] · w[n×k]ᵀ + bias`
pub fn linear(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let s: f64 = (0..k).map(|p| x[i * k + p] * w[j * k + p]).sum();
            out[i * n + j] = s + bias.map_or(0.0, |b| b[j]);
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Layer norm of one row over the channels where `mask` is set; masked
/// channels come out zero.
pub fn layernorm(x: &[f64], g: &[f64], b: &[f64], mask: &[bool], eps: f64) -> Vec<f64> {
    let live: Vec<usize> = (0..x.len()).filter(|&c| mask[c]).collect();
    let n = live.len() as f64;
    let mean = live.iter().map(|&c| x[c]).sum::<f64>() / n;
    let var = live.iter().map(|&c| (x[c] - mean).powi(2)).sum::<f64>() / n;
    let rs = 1.0 / (var + eps).sqrt();
    (0..x.len())
        .map(|c| {
            if mask[c] {
                g[c] * (x[c] - mean) * rs + b[c]
            } else {
                0.0
            }
        })
        .collect()
}

/// Batch-mean cross-entropy.
pub fn cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let c = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax(&logits[i * c..(i + 1) * c])[y])
        .sum::<f64>()
        / labels.len() as f64
}

/// Batch-mean KL(target ‖ softmax(logits)).
pub fn kl_div(logits: &[f64], target: &[f64], classes: usize) -> f64 {
    let rows = logits.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        let lp = log_softmax(&logits[r * classes..(r + 1) * classes]);
        for (c, &l) in lp.iter().enumerate() {
            let t = target[r * classes + c];
            if t > 0.0 {
                total += t * (t.ln() - l);
            }
        }
    }
    total / rows as f64
}

// ---------------------------------------------------------------------------
// Reference ViT

/// Parameters of a model widened to 64 bits, by name.
#[derive(Clone)]
pub struct RefParams(pub HashMap<String, Vec<f64>>);

impl RefParams {
    pub fn of(vit: &Vit) -> Self {
        RefParams(
            vit.params()
                .map(|(l, t)| (l.name.clone(), to_f64(t.data())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
    }
}

fn full_mask(spec: &ArchSpec) -> MaskSet {
    MaskSet::full(spec)
}

/// Class and distillation logits `[B×C]` for images `[B×C×H×W]`, written
/// with explicit loops over tokens, heads and channels.
pub fn ref_forward(
    spec: &ArchSpec,
    p: &RefParams,
    masks: Option<&MaskSet>,
    images: &[f64],
    bsz: usize,
) -> (Vec<f64>, Vec<f64>) {
    ref_forward_observed(spec, p, masks, images, bsz, &mut |_, _, _, _, _| {})
}

/// Attention probabilities seen by [`ref_forward_observed`]: sample, block,
/// head, query token and the softmax row over keys.
pub type AttnObserver<'a> = dyn FnMut(usize, usize, usize, usize, &[f64]) + 'a;

/// [`ref_forward`] that reports every attention row of every live head.
pub fn ref_forward_observed(
    spec: &ArchSpec,
    p: &RefParams,
    masks: Option<&MaskSet>,
    images: &[f64],
    bsz: usize,
    observe: &mut AttnObserver,
) -> (Vec<f64>, Vec<f64>) {
    let owned;
    let m = match masks {
        Some(m) => m,
        None => {
            owned = full_mask(spec);
            &owned
        }
    };
    let e = spec.emb;
    let (c, side, ps) = (spec.in_channels, spec.image_size, spec.patch_size);
    let per = side / ps;
    let pd = c * ps * ps;
    let n = spec.num_tokens();
    let emb_on = |v: &mut [f64]| {
        for (ch, x) in v.iter_mut().enumerate() {
            if !m.emb[ch] {
                *x = 0.0;
            }
        }
    };
    let classes = spec.num_classes;
    let mut zc = Vec::with_capacity(bsz * classes);
    let mut zd = Vec::with_capacity(bsz * classes);
    for bi in 0..bsz {
        let img = &images[bi * c * side * side..(bi + 1) * c * side * side];
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
        x.push(p.get("cls_token").to_vec());
        x.push(p.get("dist_token").to_vec());
        for py in 0..per {
            for px in 0..per {
                let mut patch = Vec::with_capacity(pd);
                for ch in 0..c {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            patch.push(img[(ch * side + py * ps + dy) * side + px * ps + dx]);
                        }
                    }
                }
                x.push(linear(
                    &patch,
                    p.get("patch_embed.weight"),
                    Some(p.get("patch_embed.bias")),
                    1,
                    pd,
                    e,
                ));
            }
        }
        let pos = p.get("pos_embed");
        for (t, tok) in x.iter_mut().enumerate() {
            for ch in 0..e {
                tok[ch] += pos[t * e + ch];
            }
            emb_on(tok);
        }
        for (b, d) in spec.blocks.iter().enumerate() {
            x = ref_block(b, d, e, p, m, x, &emb_on, &mut |hd, i, a| {
                observe(bi, b, hd, i, a)
            });
        }
        let fin: Vec<Vec<f64>> = x
            .iter()
            .map(|t| layernorm(t, p.get("norm.weight"), p.get("norm.bias"), &m.emb, 1e-6))
            .collect();
        zc.extend(linear(
            &fin[0],
            p.get("head.weight"),
            Some(p.get("head.bias")),
            1,
            e,
            classes,
        ));
        zd.extend(linear(
            &fin[1],
            p.get("head_dist.weight"),
            Some(p.get("head_dist.bias")),
            1,
            e,
            classes,
        ));
    }
    (zc, zd)
}

#[allow(clippy::too_many_arguments)]
fn ref_block(
    b: usize,
    d: &BlockDims,
    e: usize,
    p: &RefParams,
    m: &MaskSet,
    mut x: Vec<Vec<f64>>,
    emb_on: &dyn Fn(&mut [f64]),
    observe: &mut dyn FnMut(usize, usize, &[f64]),
) -> Vec<Vec<f64>> {
    let bm = &m.blocks[b];
    let n = x.len();
    let name = |s: &str| format!("blocks.{b}.{s}");
    let alive: Vec<usize> = (0..d.h)
        .filter(|&hd| bm.heads[hd] && bm.v[hd].iter().any(|&v| v))
        .collect();
    if d.h > 0 && !alive.is_empty() {
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|t| {
                layernorm(
                    t,
                    p.get(&name("norm1.weight")),
                    p.get(&name("norm1.bias")),
                    &m.emb,
                    1e-6,
                )
            })
            .collect();
        let dq = alive
            .iter()
            .map(|&hd| bm.qk[hd].iter().filter(|&&q| q).count())
            .max()
            .unwrap_or(0);
        let scale = if dq == 0 {
            1.0
        } else {
            1.0 / (dq as f64).sqrt()
        };
        let (wq, bq) = (p.get(&name("attn.q.weight")), p.get(&name("attn.q.bias")));
        let (wk, bk) = (p.get(&name("attn.k.weight")), p.get(&name("attn.k.bias")));
        let (wv, bv) = (p.get(&name("attn.v.weight")), p.get(&name("attn.v.bias")));
        let wp = p.get(&name("attn.proj.weight"));
        let bp = p.get(&name("attn.proj.bias"));
        let mut out = vec![bp.to_vec(); n];
        for &hd in &alive {
            let proj =
                |w: &[f64], bias: &[f64], width: usize, keep: &[bool], t: &[f64]| -> Vec<f64> {
                    (0..width)
                        .map(|j| {
                            if !keep[j] {
                                return 0.0;
                            }
                            let row = &w[(hd * width + j) * e..(hd * width + j + 1) * e];
                            row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
                                + bias[hd * width + j]
                        })
                        .collect()
                };
            let q: Vec<Vec<f64>> = y
                .iter()
                .map(|t| proj(wq, bq, d.qk, &bm.qk[hd], t))
                .collect();
            let k: Vec<Vec<f64>> = y
                .iter()
                .map(|t| proj(wk, bk, d.qk, &bm.qk[hd], t))
                .collect();
            let v: Vec<Vec<f64>> = y.iter().map(|t| proj(wv, bv, d.v, &bm.v[hd], t)).collect();
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let a = softmax(&scores);
                observe(hd, i, &a);
                let o: Vec<f64> = (0..d.v)
                    .map(|c| (0..n).map(|j| a[j] * v[j][c]).sum())
                    .collect();
                for (ch, slot) in out[i].iter_mut().enumerate() {
                    let row = &wp[(hd * e + ch) * d.v..(hd * e + ch + 1) * d.v];
                    *slot += row.iter().zip(&o).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        for (t, o) in x.iter_mut().zip(out.iter_mut()) {
            emb_on(o);
            t.iter_mut().zip(o.iter()).for_each(|(a, b)| *a += b);
        }
    }
    if d.mlp > 0 && bm.mlp.iter().any(|&u| u) {
        let (w1, b1) = (p.get(&name("mlp.fc1.weight")), p.get(&name("mlp.fc1.bias")));
        let (w2, b2) = (p.get(&name("mlp.fc2.weight")), p.get(&name("mlp.fc2.bias")));
        for t in x.iter_mut() {
            let y = layernorm(
                t,
                p.get(&name("norm2.weight")),
                p.get(&name("norm2.bias")),
                &m.emb,
                1e-6,
            );
            let mut hid = linear(&y, w1, Some(b1), 1, e, d.mlp);
            for (j, h) in hid.iter_mut().enumerate() {
                *h = if bm.mlp[j] { gelu(*h) } else { 0.0 };
            }
            let mut o = linear(&hid, w2, Some(b2), 1, d.mlp, e);
            emb_on(&mut o);
            t.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
    }
    x
}

/// `CE(z_c, y) + CE(z_d, y)`, the objective with ground truth as teacher.
pub fn ref_cnn_loss(
    spec: &ArchSpec,
    p: &RefParams,
    masks: Option<&MaskSet>,
    images: &[f64],
    labels: &[usize],
) -> f64 {
    let (zc, zd) = ref_forward(spec, p, masks, images, labels.len());
    cross_entropy(&zc, labels) + cross_entropy(&zd, labels)
}

// ---------------------------------------------------------------------------
// Fixtures

/// Two blocks, 8×8 images in 4×4 patches (six tokens), every axis prunable.
pub fn toy_spec() -> ArchSpec {
    ArchSpec::uniform(16, 2, BlockDims::new(2, 4, 4, 8), 8, 4, 4)
}

pub fn toy_model(seed: u64) -> Vit {
    Vit::init(&toy_spec(), &mut rng(seed)).unwrap()
}

/// Replaces every parameter with a uniform draw from `[-scale, scale]`.
pub fn randomize(vit: &mut Vit, rng: &mut impl Rng, scale: f32) {
    for t in vit.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

pub fn random_images(spec: &ArchSpec, bsz: usize, rng: &mut impl Rng) -> Tensor {
    let n = bsz * spec.in_channels * spec.image_size * spec.image_size;
    Tensor::new(
        vec![bsz, spec.in_channels, spec.image_size, spec.image_size],
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Head-aligned random masks in a state the pruner can reach: at least one
/// EMB channel, and at least one QK and V channel per block.
pub fn random_masks(spec: &ArchSpec, rng: &mut impl Rng, keep: f64) -> MaskSet {
    let mut m = MaskSet::full(spec);
    for bit in m.emb.iter_mut() {
        *bit = rng.random_bool(keep);
    }
    if !m.emb.iter().any(|&b| b) {
        let i = rng.random_range(0..spec.emb);
        m.emb[i] = true;
    }
    for (bm, d) in m.blocks.iter_mut().zip(&spec.blocks) {
        for h in bm.heads.iter_mut() {
            *h = rng.random_bool(keep);
        }
        let mut qk: Vec<bool> = (0..d.qk).map(|_| rng.random_bool(keep)).collect();
        let mut v: Vec<bool> = (0..d.v).map(|_| rng.random_bool(keep)).collect();
        // The pruner never empties QK or V of a live head.
        for bits in [&mut qk, &mut v] {
            if !bits.iter().any(|&b| b) {
                let i = rng.random_range(0..bits.len());
                bits[i] = true;
            }
        }
        bm.qk = vec![qk; d.h];
        bm.v = vec![v; d.h];
        for u in bm.mlp.iter_mut() {
            *u = rng.random_bool(keep);
        }
    }
    m
}

/// Spearman rank correlation, ties broken by position.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
