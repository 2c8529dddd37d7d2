//! In-memory image datasets: a seeded synthetic generator and IDX files.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored as `[N, C, side, side]` floats with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        side: usize,
        classes: usize,
    ) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} values for {} images of {channels}x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            side,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_image(&self) -> usize {
        self.channels * self.side * self.side
    }

    /// Gathers `indices` into an image tensor and label list. With `flip`,
    /// the images whose bit is set are mirrored horizontally.
    pub fn batch(&self, indices: &[usize], flip: Option<&[bool]>) -> Result<(Tensor, Vec<usize>)> {
        let per = self.per_image();
        let s = self.side;
        let mut out = Vec::with_capacity(indices.len() * per);
        for (k, &i) in indices.iter().enumerate() {
            let img = &self.images[i * per..(i + 1) * per];
            if flip.is_some_and(|f| f[k]) {
                for row in img.chunks(s) {
                    out.extend(row.iter().rev());
                }
            } else {
                out.extend_from_slice(img);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((
            Tensor::new(vec![indices.len(), self.channels, s, s], out)?,
            labels,
        ))
    }

    /// Shifts and scales every channel by the given `(mean, std)` pairs.
    pub fn normalize_with(&mut self, stats: &[(f32, f32)]) {
        let plane = self.side * self.side;
        let per = self.per_image();
        for img in self.images.chunks_mut(per) {
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                let (m, sd) = stats[c];
                ch.iter_mut().for_each(|x| *x = (*x - m) / sd);
            }
        }
    }

    /// Per-channel `(mean, std)`.
    pub fn channel_stats(&self) -> Vec<(f32, f32)> {
        let plane = self.side * self.side;
        (0..self.channels)
            .map(|c| {
                let vals = self
                    .images
                    .chunks(self.per_image())
                    .flat_map(|img| img[c * plane..(c + 1) * plane].iter().map(|&x| x as f64));
                let (mut n, mut s, mut s2) = (0f64, 0f64, 0f64);
                for x in vals {
                    n += 1.0;
                    s += x;
                    s2 += x * x;
                }
                let mean = s / n.max(1.0);
                let var = (s2 / n.max(1.0) - mean * mean).max(1e-12);
                (mean as f32, var.sqrt() as f32)
            })
            .collect()
    }

    /// Deterministic shuffled order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub side: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the per-pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            channels: 3,
            side: 32,
            train: 2048,
            test: 512,
            noise: 0.6,
            seed: 0,
        }
    }
}

/// Class prototypes built from a few random oriented gratings and blobs; each
/// sample is a prototype at random intensity plus Gaussian noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.channels == 0 || spec.side == 0 {
        return Err(Error::config(
            "data.synthetic",
            "classes, channels and side must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, s) = (spec.channels, spec.side);
    let per = c * s * s;
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let mut p = vec![0f32; per];
            for _ in 0..3 {
                let fx: f32 = rng.random_range(0.5..3.0);
                let fy: f32 = rng.random_range(0.5..3.0);
                let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let gains: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (cx, cy) = (
                    rng.random_range(0.0..s as f32),
                    rng.random_range(0.0..s as f32),
                );
                let r = rng.random_range(s as f32 / 8.0..s as f32 / 3.0);
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
                            let wave = (std::f32::consts::TAU * (fx * u + fy * v) + phase).sin();
                            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                            let blob = (-d2 / (2.0 * r * r)).exp();
                            p[(ch * s + y) * s + x] += gains[ch] * (0.5 * wave + blob);
                        }
                    }
                }
            }
            p
        })
        .collect();
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let mut make = |n: usize| -> Result<Dataset> {
        let mut images = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % spec.classes;
            let a: f32 = rng.random_range(0.7..1.3);
            images.extend(
                protos[label]
                    .iter()
                    .map(|&p| a * p + noise.sample(&mut rng)),
            );
            labels.push(label);
        }
        Dataset::new(images, labels, c, s, spec.classes)
    };
    let train = make(spec.train)?;
    let test = make(spec.test)?;
    Ok((train, test))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an MNIST-style IDX image file (`u8`, `[N, rows, cols]`) and label file.
/// Pixels are scaled to `[0, 1]`; images must be square.
pub fn read_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let mut fi = std::io::BufReader::new(std::fs::File::open(images)?);
    if read_u32(&mut fi)? != 0x0000_0803 {
        return Err(Error::Data(format!(
            "{}: not an IDX u8 image file",
            images.display()
        )));
    }
    let n = read_u32(&mut fi)? as usize;
    let rows = read_u32(&mut fi)? as usize;
    let cols = read_u32(&mut fi)? as usize;
    if rows != cols {
        return Err(Error::Data(format!(
            "images are {rows}x{cols}; only square images are supported"
        )));
    }
    let mut raw = vec![0u8; n * rows * cols];
    fi.read_exact(&mut raw)?;
    let mut fl = std::io::BufReader::new(std::fs::File::open(labels)?);
    if read_u32(&mut fl)? != 0x0000_0801 {
        return Err(Error::Data(format!(
            "{}: not an IDX u8 label file",
            labels.display()
        )));
    }
    let nl = read_u32(&mut fl)? as usize;
    if nl != n {
        return Err(Error::Data(format!("{n} images but {nl} labels")));
    }
    let mut lab = vec![0u8; n];
    fl.read_exact(&mut lab)?;
    Dataset::new(
        raw.iter().map(|&p| p as f32 / 255.0).collect(),
        lab.into_iter().map(usize::from).collect(),
        1,
        rows,
        classes,
    )
}

/// Writes a single-channel dataset as IDX files, quantizing pixels in `[0, 1]`.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.channels != 1 {
        return Err(Error::Data(
            "IDX export supports single-channel images only".into(),
        ));
    }
    let mut buf = Vec::with_capacity(16 + ds.images.len());
    for v in [
        0x0000_0803u32,
        ds.len() as u32,
        ds.side as u32,
        ds.side as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(
        ds.images
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(images, buf)?;
    let mut buf = Vec::with_capacity(8 + ds.len());
    for v in [0x0000_0801u32, ds.len() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.labels {
        buf.push(
            u8::try_from(l)
                .map_err(|_| Error::Data(format!("label {l} does not fit in a byte")))?,
        );
    }
    std::fs::write(labels, buf)?;
    Ok(())
}
