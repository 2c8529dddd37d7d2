//! AdamW and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers follow the model's tensor
/// order; decay skips biases, norms, tokens and positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && name != "pos_embed" && !name.ends_with("bias")
}

impl AdamW {
    pub fn new(cfg: AdamConfig, vit: &Vit) -> Self {
        let zeros = || {
            vit.tensors()
                .iter()
                .map(|t| vec![0f32; t.numel()])
                .collect()
        };
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients accumulated on `vit`.
    pub fn update(&mut self, vit: &mut Vit, lr: f32) -> Result<()> {
        if self.m.len() != vit.tensors().len() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!(
                    "{} moment buffers for {} tensors",
                    self.m.len(),
                    vit.tensors().len()
                ),
            });
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<(String, usize)> = vit
            .layouts()
            .iter()
            .map(|l| (l.name.clone(), l.shape.len()))
            .collect();
        for (i, t) in vit.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let wd = if decays(&names[i].0, names[i].1) {
                c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + wd * *w);
            }
        }
        Ok(())
    }

    /// Fresh zeroed moments sized for `vit`, e.g. after recompilation.
    pub fn reset_for(&mut self, vit: &Vit) {
        *self = AdamW::new(self.cfg, vit);
    }
}

/// `base · batch / 512`
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 512.0
}

/// Linear warmup then half-cosine decay to zero over `total` steps.
pub fn cosine_lr(peak: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}
