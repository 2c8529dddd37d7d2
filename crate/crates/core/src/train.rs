//! Training, finetuning and evaluation loops.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{loss_total, LossConfig, Targets};
use crate::model::{MaskSet, Vit};
use crate::optim::{cosine_lr, scaled_lr, AdamConfig, AdamW};
use crate::sparsity::{reapply, SparsityMasks};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Learning rate at batch size 512; the effective rate scales linearly.
    pub lr_base: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub flip: bool,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_base: 5e-4,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 5,
            schedule: Schedule::Cosine,
            flip: false,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimConfig {
    /// From-scratch training defaults.
    pub fn train() -> Self {
        Self::default()
    }

    /// Pruning-phase defaults: fixed rate, no warmup.
    pub fn prune() -> Self {
        OptimConfig {
            lr_base: 2e-4,
            warmup_epochs: 0,
            schedule: Schedule::Constant,
            ..Self::default()
        }
    }

    /// Finetuning defaults: cosine without warmup.
    pub fn finetune() -> Self {
        OptimConfig {
            lr_base: 2e-4,
            warmup_epochs: 0,
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(
                format!("{section}.batch_size"),
                "must be >= 1",
            ));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::config(
                format!("{section}.lr_base"),
                "must be finite and > 0",
            ));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.lr_base, self.batch_size)
    }

    pub fn lr_at(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.peak_lr(),
            Schedule::Cosine => cosine_lr(
                self.peak_lr(),
                step,
                total,
                self.warmup_epochs * steps_per_epoch,
            ),
        }
    }
}

/// Source of the hard labels used to supervise the distillation token.
#[derive(Debug, Clone)]
pub enum Teacher {
    /// Ground truth stands in for the teacher.
    Labels,
    /// A frozen model; its averaged-logit argmax is the label.
    Model(Box<Vit>),
}

impl Teacher {
    pub fn labels(&self, images: &Tensor, truth: &[usize]) -> Result<Vec<usize>> {
        match self {
            Teacher::Labels => Ok(truth.to_vec()),
            Teacher::Model(m) => {
                let logits = m.predict(images, None)?;
                Ok(argmax_rows(&logits, m.spec().num_classes))
            }
        }
    }
}

pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Everything besides the batch that the objective needs.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub loss: &'a LossConfig,
    pub teacher: &'a Teacher,
    /// Frozen model the pruned network is distilled from.
    pub full: Option<&'a Vit>,
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f32,
    /// Averaged logits `[B × classes]`.
    pub logits: Vec<f32>,
}

/// Zeroes the model's gradients, runs the objective on one batch and leaves
/// the fresh gradients on the model's tensors.
pub fn compute_grads(
    vit: &mut Vit,
    masks: Option<&MaskSet>,
    images: &Tensor,
    labels: &[usize],
    sup: &Supervision,
) -> Result<StepOutput> {
    let teacher_labels = if sup.loss.mode.needs_teacher_labels() {
        Some(sup.teacher.labels(images, labels)?)
    } else {
        None
    };
    let full_logits = match (sup.loss.mode.needs_full_teacher(), sup.full) {
        (true, Some(full)) => {
            let mut g = Graph::new();
            let out = full.forward(&mut g, images, None, false)?;
            Some((
                g.value(out.logits_cls).to_vec(),
                g.value(out.logits_dist).to_vec(),
            ))
        }
        _ => None,
    };
    let targets = Targets {
        labels,
        teacher_labels: teacher_labels.as_deref(),
        full_logits: full_logits
            .as_ref()
            .map(|(c, d)| (c.as_slice(), d.as_slice())),
    };
    let mut g = Graph::new();
    let out = vit.forward(&mut g, images, masks, false)?;
    let loss = loss_total(&mut g, sup.loss, out.logits_cls, out.logits_dist, &targets)?;
    g.backward(loss)?;
    vit.zero_grad();
    vit.accumulate_grads(&g)?;
    let logits = g
        .value(out.logits_cls)
        .iter()
        .zip(g.value(out.logits_dist))
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(StepOutput {
        loss: g.value(loss)[0],
        logits,
    })
}

/// Top-1 accuracy of averaged class/distillation logits.
pub fn evaluate(
    vit: &Vit,
    masks: Option<&MaskSet>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk, None)?;
        let logits = vit.predict(&x, masks)?;
        correct += argmax_rows(&logits, vit.spec().num_classes)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

/// Flip bits for a batch, derived from the epoch order so runs are repeatable.
fn flip_bits(order_seed: u64, epoch: u64, step: usize, n: usize) -> Vec<bool> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        order_seed.wrapping_add(0x5EED) ^ (epoch << 32) ^ step as u64,
    );
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Runs `cfg.epochs` epochs of minibatch training. With `sparsity`, pruned
/// weights are re-zeroed after every update.
#[allow(clippy::too_many_arguments)]
pub fn train(
    vit: &mut Vit,
    opt: &mut AdamW,
    masks: Option<&MaskSet>,
    ds: &Dataset,
    cfg: &OptimConfig,
    sup: &Supervision,
    sparsity: Option<&SparsityMasks>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate("optim")?;
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = ds.epoch_order(seed, epoch as u64);
        let (mut loss_sum, mut correct, mut lr) = (0f64, 0usize, 0f64);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flips = cfg
                .flip
                .then(|| flip_bits(seed, epoch as u64, bi, chunk.len()));
            let (x, y) = ds.batch(chunk, flips.as_deref())?;
            let out = compute_grads(vit, masks, &x, &y, sup)?;
            lr = cfg.lr_at(step, total, steps_per_epoch);
            opt.update(vit, lr as f32)?;
            if let Some(sp) = sparsity {
                reapply(vit, sp)?;
            }
            loss_sum += out.loss as f64 * chunk.len() as f64;
            correct += argmax_rows(&out.logits, vit.spec().num_classes)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            step += 1;
        }
        let s = EpochStats {
            epoch,
            loss: loss_sum / ds.len().max(1) as f64,
            train_acc: correct as f64 / ds.len().max(1) as f64,
            lr,
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}
