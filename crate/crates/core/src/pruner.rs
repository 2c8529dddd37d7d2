//! The iterative prune loop: train, accumulate importance, remove the
//! lowest-scoring group on schedule, stop at a target speedup, recompile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{
    enumerate_groups, without, AlignmentMode, AxisSums, Divisors, GroupKind, GroupSizes,
    ImportanceLedger, LatencyCache, LedgerRow, PruneGroup,
};
use crate::lut::LatencyLut;
use crate::model::{live_param_count, recompile, ArchSpec, BlockDims, MaskSet, Vit};
use crate::optim::AdamW;
use crate::train::{compute_grads, OptimConfig, Supervision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    /// Training steps between removal events; nothing is removed before the
    /// first interval completes.
    pub interval_steps: usize,
    pub groups_per_removal: usize,
    /// Stop once full latency / current latency reaches this ratio.
    pub target_speedup: f64,
    /// When set, stop after exactly this many removals instead.
    pub removals: Option<usize>,
    /// Restrict removals to one kind.
    pub component_filter: Option<GroupKind>,
    pub alignment: AlignmentMode,
    pub group_sizes: GroupSizes,
    pub divisors: Divisors,
    pub ema_decay: f64,
    /// Latency weight; `None` calibrates it at the first removal event.
    pub eta: Option<f64>,
    /// Median penalty over median Taylor score used by calibration.
    pub eta_ratio: f64,
    pub min_emb: usize,
    pub allow_empty_heads: bool,
    pub allow_empty_mlp: bool,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            interval_steps: 100,
            groups_per_removal: 1,
            target_speedup: 2.0,
            removals: None,
            component_filter: None,
            alignment: AlignmentMode::HeadAligned,
            group_sizes: GroupSizes::default(),
            divisors: Divisors::default(),
            ema_decay: 0.9,
            eta: None,
            eta_ratio: 0.1,
            min_emb: 16,
            allow_empty_heads: true,
            allow_empty_mlp: true,
        }
    }
}

impl PruneSchedule {
    /// Single-component preset: one kind only, 32 units per group, with the
    /// per-kind interval (EMB 1000, MLP 50, QK and V 200).
    pub fn single_component(kind: GroupKind) -> Result<Self> {
        let interval_steps = match kind {
            GroupKind::Emb => 1000,
            GroupKind::Mlp => 50,
            GroupKind::Qk | GroupKind::V => 200,
            GroupKind::H => {
                return Err(Error::config(
                    "prune.schedule.component_filter",
                    "no single-component preset for H",
                ));
            }
        };
        let mut s = PruneSchedule {
            interval_steps,
            component_filter: Some(kind),
            ..Self::default()
        };
        match kind {
            GroupKind::Emb => s.group_sizes.emb = 32,
            GroupKind::Mlp => s.group_sizes.mlp = 32,
            GroupKind::Qk => s.group_sizes.qk = 32,
            GroupKind::V => s.group_sizes.v = 32,
            GroupKind::H => unreachable!(),
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_steps == 0 {
            return Err(Error::config(
                "prune.schedule.interval_steps",
                "must be >= 1",
            ));
        }
        if self.groups_per_removal == 0 {
            return Err(Error::config(
                "prune.schedule.groups_per_removal",
                "must be >= 1",
            ));
        }
        if !(self.target_speedup >= 1.0 && self.target_speedup.is_finite()) {
            return Err(Error::config(
                "prune.schedule.target_speedup",
                "must be finite and >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(
                "prune.schedule.ema_decay",
                "must be in [0, 1)",
            ));
        }
        if self.eta.is_some_and(|e| !e.is_finite() || e < 0.0) {
            return Err(Error::config(
                "prune.schedule.eta",
                "must be finite and >= 0",
            ));
        }
        if self.min_emb == 0 {
            return Err(Error::config("prune.schedule.min_emb", "must be >= 1"));
        }
        if self.alignment == AlignmentMode::Concatenated
            && self.component_filter == Some(GroupKind::H)
        {
            return Err(Error::config(
                "prune.schedule.component_filter",
                "concatenated mode has no H groups",
            ));
        }
        self.group_sizes.validate()
    }
}

/// How the group to remove is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Minimum latency-aware smoothed Taylor score.
    Taylor,
    /// Uniform over eligible groups from a seeded generator.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStatus {
    TargetReached,
    RemovalsReached,
    /// No eligible group was left before the target; a warning, not an error.
    FloorReached,
}

impl PruneStatus {
    pub fn is_warning(self) -> bool {
        self == PruneStatus::FloorReached
    }
}

/// Event log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PruneEvent {
    Start {
        arch: ArchSpec,
        schedule: PruneSchedule,
        criterion: Criterion,
        latency_full: f64,
        params_full: usize,
    },
    Step {
        step: usize,
        loss: f64,
        lr: f64,
    },
    Removal {
        /// 0-based removal count.
        index: usize,
        step: usize,
        group: PruneGroup,
        /// Every eligible candidate at decision time, in group order.
        candidates: Vec<LedgerRow>,
        eta: f64,
        latency_before: f64,
        latency_after: f64,
        speedup: f64,
        params_live: usize,
        emb: usize,
        blocks: Vec<BlockDims>,
    },
    End {
        status: PruneStatus,
        steps: usize,
        removals: usize,
        latency_full: f64,
        latency_final: f64,
        speedup: f64,
    },
}

/// Whether removing `group` would drop anything that still contributes.
pub fn group_is_live(group: &PruneGroup, sizes: &GroupSizes, masks: &MaskSet) -> bool {
    let r = |len: usize| crate::importance::slice_range(group.slice, sizes.of(group.kind), len);
    let any = |bits: &[bool]| bits[r(bits.len())].iter().any(|&b| b);
    match group.kind {
        GroupKind::Emb => any(&masks.emb),
        GroupKind::H => {
            let bm = &masks.blocks[group.block.expect("block")];
            r(bm.heads.len()).any(|i| bm.head_alive(i))
        }
        GroupKind::Qk | GroupKind::V => {
            let bm = &masks.blocks[group.block.expect("block")];
            let rows = if group.kind == GroupKind::Qk {
                &bm.qk
            } else {
                &bm.v
            };
            (0..bm.heads.len())
                .filter(|&i| group.head.is_none_or(|h| h == i))
                .any(|i| bm.head_alive(i) && any(&rows[i]))
        }
        GroupKind::Mlp => any(&masks.blocks[group.block.expect("block")].mlp),
    }
}

/// Whether `group` may be removed under the schedule's filter and floors.
pub fn is_eligible(group: &PruneGroup, schedule: &PruneSchedule, masks: &MaskSet) -> bool {
    if schedule.component_filter.is_some_and(|k| k != group.kind) {
        return false;
    }
    let sizes = &schedule.group_sizes;
    if !group_is_live(group, sizes, masks) {
        return false;
    }
    let after = without(group, sizes, masks);
    match group.kind {
        GroupKind::Emb => after.live_emb() >= schedule.min_emb,
        GroupKind::Mlp => {
            schedule.allow_empty_mlp || after.blocks[group.block.expect("block")].mlp_alive()
        }
        GroupKind::H => {
            schedule.allow_empty_heads || after.blocks[group.block.expect("block")].attn_alive()
        }
        GroupKind::Qk | GroupKind::V => {
            let b = group.block.expect("block");
            let (old, new) = (&masks.blocks[b], &after.blocks[b]);
            let rows = if group.kind == GroupKind::Qk {
                &new.qk
            } else {
                &new.v
            };
            (0..old.heads.len())
                .filter(|&i| old.head_alive(i))
                .all(|i| rows[i].iter().any(|&x| x))
        }
    }
}

pub fn eligible_groups(
    all: &[PruneGroup],
    schedule: &PruneSchedule,
    masks: &MaskSet,
) -> Vec<PruneGroup> {
    all.iter()
        .copied()
        .filter(|g| is_eligible(g, schedule, masks))
        .collect()
}

/// Minimum combined score; ties go to the smaller group id. Rows must be in
/// group order.
pub fn argmin_row(rows: &[LedgerRow]) -> Option<&LedgerRow> {
    rows.iter()
        .fold(None, |best: Option<&LedgerRow>, r| match best {
            Some(b)
                if b.combined < r.combined || (b.combined == r.combined && b.group <= r.group) =>
            {
                Some(b)
            }
            _ => Some(r),
        })
}

/// One linear extent that is not a multiple of 16.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegalityViolation {
    pub block: Option<usize>,
    pub dim: String,
    pub value: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegalityReport {
    pub violations: Vec<LegalityViolation>,
}

impl LegalityReport {
    pub fn is_legal(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that emb, mlp, qk·h and v·h of every surviving block are
/// multiples of 16.
pub fn structural_floor_check(base: &ArchSpec, masks: &MaskSet) -> LegalityReport {
    legality_of(&masks.effective_spec(base))
}

/// [`structural_floor_check`] on dense dimensions.
pub fn legality_of(spec: &ArchSpec) -> LegalityReport {
    let mut violations = Vec::new();
    let mut check = |block: Option<usize>, dim: &str, value: usize| {
        if !value.is_multiple_of(16) {
            violations.push(LegalityViolation {
                block,
                dim: dim.to_string(),
                value,
            });
        }
    };
    check(None, "emb", spec.emb);
    for (b, d) in spec.blocks.iter().enumerate() {
        check(Some(b), "qk*h", d.qk * d.h);
        check(Some(b), "v*h", d.v * d.h);
        check(Some(b), "mlp", d.mlp);
    }
    LegalityReport { violations }
}

/// Datasets and settings the loop trains with.
#[derive(Debug, Clone, Copy)]
pub struct PruneInputs<'a> {
    pub data: &'a Dataset,
    /// Batch size and base rate; the rate is held constant while pruning.
    pub optim: &'a OptimConfig,
    pub sup: Supervision<'a>,
    pub lut: &'a LatencyLut,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// Trained weights at the original extents.
    pub masked: Vit,
    pub masks: MaskSet,
    /// Dense model with the removed groups gone.
    pub model: Vit,
    pub ledger: ImportanceLedger,
    pub history: Vec<PruneEvent>,
    pub status: PruneStatus,
    pub steps: usize,
    pub removals: usize,
    pub latency_full: f64,
    pub latency_final: f64,
}

impl PruneOutcome {
    pub fn speedup(&self) -> f64 {
        speedup(self.latency_full, self.latency_final)
    }

    pub fn removed_groups(&self) -> Vec<PruneGroup> {
        removals_of(&self.history).map(|(g, _)| g).collect()
    }
}

fn speedup(full: f64, now: f64) -> f64 {
    if now > 0.0 {
        full / now
    } else {
        f64::MAX
    }
}

fn removals_of(history: &[PruneEvent]) -> impl Iterator<Item = (PruneGroup, usize)> + '_ {
    history.iter().filter_map(|e| match e {
        PruneEvent::Removal { group, index, .. } => Some((*group, *index)),
        _ => None,
    })
}

struct Loop<'a, 'b> {
    spec: ArchSpec,
    schedule: PruneSchedule,
    criterion: Criterion,
    lut: &'a LatencyLut,
    groups: Vec<PruneGroup>,
    masks: MaskSet,
    ledger: ImportanceLedger,
    rng: Option<ChaCha8Rng>,
    latency_full: f64,
    latency: f64,
    removals: usize,
    history: Vec<PruneEvent>,
    sink: &'b mut dyn FnMut(&PruneEvent) -> Result<()>,
}

impl Loop<'_, '_> {
    fn emit(&mut self, e: PruneEvent) -> Result<()> {
        (self.sink)(&e)?;
        self.history.push(e);
        Ok(())
    }

    fn done(&self) -> Option<PruneStatus> {
        match self.schedule.removals {
            Some(n) => (self.removals >= n).then_some(PruneStatus::RemovalsReached),
            None => (speedup(self.latency_full, self.latency) >= self.schedule.target_speedup)
                .then_some(PruneStatus::TargetReached),
        }
    }

    /// Removes one group. `Ok(None)` means nothing was eligible.
    fn remove_one(&mut self, step: usize) -> Result<Option<PruneGroup>> {
        let eligible = eligible_groups(&self.groups, &self.schedule, &self.masks);
        if eligible.is_empty() {
            return Ok(None);
        }
        let sizes = self.schedule.group_sizes;
        let cache = LatencyCache::new(self.lut, &self.spec, &self.masks)?;
        for g in &eligible {
            let s = cache.saving(self.lut, &self.spec, g, &sizes, &self.masks)?;
            self.ledger.set_saving(g, s);
        }
        if self.ledger.eta.is_none() {
            match self.criterion {
                Criterion::Taylor => {
                    let eta = self
                        .ledger
                        .calibrate_eta(&eligible, self.schedule.eta_ratio);
                    log::info!("latency weight calibrated to {eta:.6e}");
                }
                Criterion::Random { .. } => self.ledger.eta = Some(0.0),
            }
        }
        let rows: Vec<LedgerRow> = eligible
            .iter()
            .map(|g| self.ledger.row(g).expect("ledger entry"))
            .collect();
        let chosen = match (&mut self.rng, self.criterion) {
            (Some(rng), Criterion::Random { .. }) => rows[rng.random_range(0..rows.len())].group,
            _ => argmin_row(&rows).expect("non-empty").group,
        };
        let before = self.latency;
        crate::importance::remove_group(&chosen, &sizes, &mut self.masks);
        self.ledger.retire(&chosen);
        self.latency = self.lut.masked_latency(&self.spec, &self.masks)?;
        let eff = self.masks.effective_spec(&self.spec);
        let e = PruneEvent::Removal {
            index: self.removals,
            step,
            group: chosen,
            candidates: rows,
            eta: self.ledger.eta_or_zero(),
            latency_before: before,
            latency_after: self.latency,
            speedup: speedup(self.latency_full, self.latency),
            params_live: live_param_count(&self.spec, &self.masks),
            emb: eff.emb,
            blocks: eff.blocks,
        };
        self.removals += 1;
        log::debug!(
            "step {step}: removed {chosen}, speedup {:.3}",
            speedup(self.latency_full, self.latency)
        );
        self.emit(e)?;
        Ok(Some(chosen))
    }
}

/// Prunes `vit` starting from `masks` (full when `None`). Every training
/// step and removal is passed to `sink` as it happens.
pub fn run(
    mut vit: Vit,
    masks: Option<MaskSet>,
    schedule: &PruneSchedule,
    criterion: Criterion,
    inputs: &PruneInputs,
    seed: u64,
    sink: &mut dyn FnMut(&PruneEvent) -> Result<()>,
) -> Result<PruneOutcome> {
    schedule.validate()?;
    inputs.optim.validate("optim")?;
    let spec = vit.spec().clone();
    let masks = masks.unwrap_or_else(|| MaskSet::full(&spec));
    masks.check_against(&spec)?;
    let groups = enumerate_groups(&spec, &schedule.group_sizes, schedule.alignment);
    let active: Vec<PruneGroup> = groups
        .iter()
        .copied()
        .filter(|g| group_is_live(g, &schedule.group_sizes, &masks))
        .collect();
    let ledger = ImportanceLedger::new(
        active.iter().copied(),
        schedule.ema_decay,
        schedule.eta,
        schedule.divisors,
    );
    let latency_full = inputs.lut.model_latency(&spec)?;
    let latency = inputs.lut.masked_latency(&spec, &masks)?;
    let mut lp = Loop {
        spec: spec.clone(),
        schedule: *schedule,
        criterion,
        lut: inputs.lut,
        groups,
        masks,
        ledger,
        rng: match criterion {
            Criterion::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Criterion::Taylor => None,
        },
        latency_full,
        latency,
        removals: 0,
        history: Vec::new(),
        sink,
    };
    lp.emit(PruneEvent::Start {
        arch: spec.clone(),
        schedule: *schedule,
        criterion,
        latency_full,
        params_full: live_param_count(&spec, &MaskSet::full(&spec)),
    })?;

    let mut opt = AdamW::new(inputs.optim.adam, &vit);
    let lr = inputs.optim.peak_lr();
    let bs = inputs.optim.batch_size;
    let n_blocks = spec.num_blocks();
    let mut step = 0usize;
    let mut epoch = 0u64;
    let status = 'outer: loop {
        if let Some(s) = lp.done() {
            break s;
        }
        let order = inputs.data.epoch_order(seed, epoch);
        epoch += 1;
        if order.is_empty() {
            return Err(Error::Data("pruning needs a non-empty training set".into()));
        }
        for chunk in order.chunks(bs) {
            let (x, y) = inputs.data.batch(chunk, None)?;
            let out = compute_grads(&mut vit, Some(&lp.masks), &x, &y, &inputs.sup)?;
            if criterion == Criterion::Taylor {
                let sums = AxisSums::from_model(&vit)?;
                let sizes = schedule.group_sizes;
                let div = schedule.divisors;
                let scores: Vec<(PruneGroup, f64)> = lp
                    .ledger
                    .entries
                    .keys()
                    .map(|g| {
                        (
                            *g,
                            crate::importance::group_taylor(&sums, g, &sizes, &div, n_blocks),
                        )
                    })
                    .collect();
                lp.ledger.accumulate(scores);
            }
            opt.update(&mut vit, lr as f32)?;
            lp.emit(PruneEvent::Step {
                step,
                loss: out.loss as f64,
                lr,
            })?;
            step += 1;
            if step.is_multiple_of(schedule.interval_steps) {
                for _ in 0..schedule.groups_per_removal {
                    if lp.remove_one(step)?.is_none() {
                        log::warn!(
                            "no eligible group left at speedup {:.3}",
                            speedup(lp.latency_full, lp.latency)
                        );
                        break 'outer PruneStatus::FloorReached;
                    }
                    if let Some(s) = lp.done() {
                        break 'outer s;
                    }
                }
            }
        }
    };
    let model = if lp.masks.is_full() {
        vit.clone()
    } else {
        recompile(&vit, &lp.masks)?
    };
    let end = PruneEvent::End {
        status,
        steps: step,
        removals: lp.removals,
        latency_full,
        latency_final: lp.latency,
        speedup: speedup(latency_full, lp.latency),
    };
    lp.emit(end)?;
    Ok(PruneOutcome {
        masked: vit,
        masks: lp.masks,
        model,
        ledger: lp.ledger,
        history: lp.history,
        status,
        steps: step,
        removals: lp.removals,
        latency_full,
        latency_final: lp.latency,
    })
}

/// Outcome of re-deriving every removal decision from a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub removals: usize,
    pub decisions_matched: usize,
    pub mismatches: Vec<String>,
    /// Logged latency never increased across removals.
    pub latency_monotone: bool,
    /// For target-stopped runs, the target was crossed on the final removal only.
    pub crossed_on_last_only: bool,
    /// Every post-removal architecture passed the ÷16 check.
    pub legal_after_every_removal: bool,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
            && self.decisions_matched == self.removals
            && self.latency_monotone
            && self.crossed_on_last_only
    }
}

/// Replays a pruning log: rebuilds the masks from the start record, checks
/// each removal's candidate set against the floors, and re-derives the choice
/// (argmin for Taylor, the seeded draw for random).
pub fn replay(history: &[PruneEvent]) -> Result<ReplayReport> {
    let (arch, schedule, criterion) = match history.first() {
        Some(PruneEvent::Start {
            arch,
            schedule,
            criterion,
            ..
        }) => (arch, schedule, *criterion),
        _ => {
            return Err(Error::Events(
                "log does not begin with a start record".into(),
            ))
        }
    };
    let sizes = schedule.group_sizes;
    let groups = enumerate_groups(arch, &sizes, schedule.alignment);
    let mut masks = MaskSet::full(arch);
    let mut rng = match criterion {
        Criterion::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Criterion::Taylor => None,
    };
    let mut rep = ReplayReport {
        removals: 0,
        decisions_matched: 0,
        mismatches: Vec::new(),
        latency_monotone: true,
        crossed_on_last_only: true,
        legal_after_every_removal: true,
    };
    let mut speedups = Vec::new();
    let mut last_latency = f64::INFINITY;
    for e in history {
        match e {
            PruneEvent::Removal {
                index,
                group,
                candidates,
                eta,
                latency_before,
                latency_after,
                speedup,
                ..
            } => {
                rep.removals += 1;
                let expect = eligible_groups(&groups, schedule, &masks);
                let logged: Vec<PruneGroup> = candidates.iter().map(|r| r.group).collect();
                if expect != logged {
                    rep.mismatches.push(format!(
                        "removal {index}: candidate set differs from the floors"
                    ));
                }
                for r in candidates {
                    if r.combined != r.taylor - eta * r.saving {
                        rep.mismatches.push(format!(
                            "removal {index}: inconsistent score for {}",
                            r.group
                        ));
                        break;
                    }
                }
                let derived = match (&mut rng, criterion) {
                    (Some(rng), Criterion::Random { .. }) if !candidates.is_empty() => {
                        Some(candidates[rng.random_range(0..candidates.len())].group)
                    }
                    _ => argmin_row(candidates).map(|r| r.group),
                };
                if derived == Some(*group) {
                    rep.decisions_matched += 1;
                } else {
                    rep.mismatches.push(format!(
                        "removal {index}: logged {group}, derived {derived:?}"
                    ));
                }
                crate::importance::remove_group(group, &sizes, &mut masks);
                if *latency_after > *latency_before || *latency_before > last_latency {
                    rep.latency_monotone = false;
                }
                last_latency = *latency_after;
                rep.legal_after_every_removal &= structural_floor_check(arch, &masks).is_legal();
                speedups.push(*speedup);
            }
            PruneEvent::End {
                status, removals, ..
            } => {
                if *removals != rep.removals {
                    rep.mismatches.push(format!(
                        "end record counts {removals} removals, log has {}",
                        rep.removals
                    ));
                }
                if *status == PruneStatus::TargetReached && schedule.removals.is_none() {
                    let t = schedule.target_speedup;
                    let n = speedups.len();
                    rep.crossed_on_last_only = speedups
                        .iter()
                        .enumerate()
                        .all(|(i, &s)| (s >= t) == (i + 1 == n));
                }
            }
            _ => {}
        }
    }
    Ok(rep)
}

/// Masks after applying the removals recorded in a log, in order.
pub fn masks_from_history(history: &[PruneEvent]) -> Result<(ArchSpec, MaskSet)> {
    let (arch, schedule) = match history.first() {
        Some(PruneEvent::Start { arch, schedule, .. }) => (arch.clone(), *schedule),
        _ => {
            return Err(Error::Events(
                "log does not begin with a start record".into(),
            ))
        }
    };
    let mut masks = MaskSet::full(&arch);
    for (g, _) in removals_of(history) {
        crate::importance::remove_group(&g, &schedule.group_sizes, &mut masks);
    }
    Ok((arch, masks))
}

/// Parameter count and latency of one point of a scheme comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemePoint {
    pub params: usize,
    pub latency: f64,
    pub removals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub budget: usize,
    pub aligned: SchemePoint,
    pub concatenated: SchemePoint,
}

impl SchemeComparison {
    pub fn aligned_no_slower(&self) -> bool {
        self.aligned.latency <= self.concatenated.latency
    }
}

/// Prunes by weight magnitude under both alignment modes until the live
/// parameter count first drops to `budget_fraction` of the original, then
/// compares latencies. Concatenated heads are charged at their padded width.
pub fn compare_schemes(
    vit: &Vit,
    lut: &LatencyLut,
    base: &PruneSchedule,
    budget_fraction: f64,
) -> Result<SchemeComparison> {
    let spec = vit.spec();
    let full = live_param_count(spec, &MaskSet::full(spec));
    let budget = (full as f64 * budget_fraction).round() as usize;
    // Gradients set to the weights make the axis sums Σ w².
    let mut sq = vit.clone();
    for t in sq.tensors_mut() {
        t.zero_grad();
        let w = t.data().to_vec();
        t.accumulate_grad(&w)?;
    }
    let sums = AxisSums::from_model(&sq)?;
    let run_mode = |mode: AlignmentMode| -> Result<SchemePoint> {
        let sched = PruneSchedule {
            alignment: mode,
            component_filter: None,
            ..*base
        };
        let groups = enumerate_groups(spec, &sched.group_sizes, mode);
        let mut masks = MaskSet::full(spec);
        let mut removals = 0;
        let mut params = full;
        while params > budget {
            let rows: Vec<LedgerRow> = eligible_groups(&groups, &sched, &masks)
                .into_iter()
                .map(|g| {
                    let s = sums.group_sum(&g, &sched.group_sizes);
                    LedgerRow {
                        group: g,
                        taylor: s,
                        saving: 0.0,
                        combined: s,
                    }
                })
                .collect();
            let Some(r) = argmin_row(&rows) else { break };
            crate::importance::remove_group(&r.group, &sched.group_sizes, &mut masks);
            params = live_param_count(spec, &masks);
            removals += 1;
        }
        Ok(SchemePoint {
            params,
            latency: lut.masked_latency(spec, &masks)?,
            removals,
        })
    };
    Ok(SchemeComparison {
        budget,
        aligned: run_mode(AlignmentMode::HeadAligned)?,
        concatenated: run_mode(AlignmentMode::Concatenated)?,
    })
}
