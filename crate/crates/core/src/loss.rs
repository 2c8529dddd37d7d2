//! Training objectives: CNN hard distillation, full-model distillation and
//! the ablation variants built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `alpha · full + cnn`
    Proposed,
    /// Cross-entropy on the class token plus hard distillation on the
    /// distillation token.
    CnnOnly,
    /// Full-model distillation plus cross-entropy on averaged logits.
    FullPlusCe,
    /// Cross-entropy on averaged logits.
    CeOnly,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Proposed => "proposed",
            LossMode::CnnOnly => "cnn_only",
            LossMode::FullPlusCe => "full_plus_ce",
            LossMode::CeOnly => "ce_only",
        }
    }

    pub fn needs_full_teacher(self) -> bool {
        matches!(self, LossMode::Proposed | LossMode::FullPlusCe)
    }

    pub fn needs_teacher_labels(self) -> bool {
        matches!(self, LossMode::Proposed | LossMode::CnnOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f32,
    pub tau: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Proposed,
            alpha: 1e5,
            tau: 20.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("loss.alpha", "must be finite and >= 0"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Supervision available for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub labels: &'a [usize],
    /// Hard labels predicted by the CNN-style teacher.
    pub teacher_labels: Option<&'a [usize]>,
    /// Class-token and distillation-token logits of the frozen full model.
    pub full_logits: Option<(&'a [f32], &'a [f32])>,
}

/// `CE(z_c, Y) + CE(z_d, Y_teacher)`
pub fn loss_cnn(
    g: &mut Graph,
    zc: Var,
    zd: Var,
    labels: &[usize],
    teacher_labels: &[usize],
) -> Result<Var> {
    let a = g.cross_entropy(zc, labels)?;
    let b = g.cross_entropy(zd, teacher_labels)?;
    g.add(a, b)
}

/// Softmax of `tau · logits` row by row.
pub fn tempered_probs(logits: &[f32], classes: usize, tau: f32) -> Vec<f32> {
    let mut out: Vec<f32> = logits.iter().map(|z| z * tau).collect();
    out.chunks_mut(classes).for_each(softmax_row);
    out
}

/// `KL(Ψ(τ z_c^t) ‖ Ψ(τ z_c^s)) + KL(Ψ(τ z_d^t) ‖ Ψ(τ z_d^s))`
pub fn loss_full(g: &mut Graph, zc: Var, zd: Var, tc: &[f32], td: &[f32], tau: f32) -> Result<Var> {
    let classes = *g.shape(zc).last().unwrap_or(&1);
    let kl = |g: &mut Graph, z: Var, t: &[f32]| -> Result<Var> {
        let zs = g.scale(z, tau);
        g.kl_div(zs, &tempered_probs(t, classes, tau))
    };
    let a = kl(g, zc, tc)?;
    let b = kl(g, zd, td)?;
    g.add(a, b)
}

/// `CE((z_c + z_d) / 2, Y)`
pub fn loss_ce_avg(g: &mut Graph, zc: Var, zd: Var, labels: &[usize]) -> Result<Var> {
    let s = g.add(zc, zd)?;
    let avg = g.scale(s, 0.5);
    g.cross_entropy(avg, labels)
}

/// Mode-selected objective.
pub fn loss_total(g: &mut Graph, cfg: &LossConfig, zc: Var, zd: Var, t: &Targets) -> Result<Var> {
    let mode = cfg.mode.name();
    let teacher_labels = || {
        t.teacher_labels.ok_or(Error::MissingLossInput {
            mode,
            what: "teacher labels",
        })
    };
    let full = || {
        t.full_logits.ok_or(Error::MissingLossInput {
            mode,
            what: "full-model logits",
        })
    };
    match cfg.mode {
        LossMode::CnnOnly => loss_cnn(g, zc, zd, t.labels, teacher_labels()?),
        LossMode::CeOnly => loss_ce_avg(g, zc, zd, t.labels),
        LossMode::Proposed => {
            let (tc, td) = full()?;
            let f = loss_full(g, zc, zd, tc, td, cfg.tau)?;
            let f = g.scale(f, cfg.alpha);
            let c = loss_cnn(g, zc, zd, t.labels, teacher_labels()?)?;
            g.add(f, c)
        }
        LossMode::FullPlusCe => {
            let (tc, td) = full()?;
            let f = loss_full(g, zc, zd, tc, td, cfg.tau)?;
            let c = loss_ce_avg(g, zc, zd, t.labels)?;
            g.add(f, c)
        }
    }
}
