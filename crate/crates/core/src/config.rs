//! Run configuration.
//!
//! One TOML file with a section per concern. Every field has a default;
//! unknown keys are rejected. After loading, [`RunConfig::materialize`]
//! resolves the architecture so the written-back file records every
//! effective value.
//!
//! ```toml
//! [run]
//! seed = 0
//! out = "runs/demo"
//! input = "runs/train/model.ckpt"   # checkpoint consumed by prune, finetune, sparsify, eval
//!
//! [model]
//! preset = "desk"                   # desk | deit_tiny | deit_small | deit_base
//!
//! [data]
//! kind = "synthetic"                # or "idx" with [data.idx] paths
//!
//! [data.synthetic]
//! classes = 8
//!
//! [loss]
//! mode = "proposed"                 # proposed | cnn_only | full_plus_ce | ce_only
//!
//! [prune]
//! criterion = "taylor"
//!
//! [prune.schedule]
//! interval_steps = 100
//! target_speedup = 2.0
//!
//! [lut]
//! grid = "desk"                     # desk | paper
//! runner = "analytic"               # analytic | wall_clock
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_idx, synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::lut::{LutGrid, RunnerKind};
use crate::model::ArchSpec;
use crate::nvit::NvitRule;
use crate::pruner::{Criterion, PruneSchedule};
use crate::train::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub input: Option<PathBuf>,
    pub eval_batch: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            threads: None,
            out: PathBuf::from("runs/out"),
            input: None,
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    /// Architecture file as written by `generate`; overrides the preset.
    pub arch_file: Option<PathBuf>,
    /// Explicit architecture; overrides both of the above.
    pub arch: Option<ArchSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            arch_file: None,
            arch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub synthetic: SyntheticSpec,
    pub idx: Option<IdxPaths>,
    /// Standardize each channel with training-set statistics.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            synthetic: SyntheticSpec::default(),
            idx: None,
            normalize: true,
        }
    }
}

impl DataSection {
    pub fn classes(&self) -> Result<usize> {
        match self.kind {
            DataKind::Synthetic => Ok(self.synthetic.classes),
            DataKind::Idx => Ok(self.idx_paths()?.classes),
        }
    }

    fn idx_paths(&self) -> Result<&IdxPaths> {
        self.idx
            .as_ref()
            .ok_or_else(|| Error::config("data.idx", "required when data.kind = \"idx\""))
    }

    /// Loads `(train, test)`, normalized when configured.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self.kind {
            DataKind::Synthetic => synthetic(&self.synthetic)?,
            DataKind::Idx => {
                let p = self.idx_paths()?;
                (
                    read_idx(&p.train_images, &p.train_labels, p.classes)?,
                    read_idx(&p.test_images, &p.test_labels, p.classes)?,
                )
            }
        };
        if self.normalize {
            let stats = train.channel_stats();
            train.normalize_with(&stats);
            test.normalize_with(&stats);
        }
        Ok((train, test))
    }

    /// Channels and image side without loading IDX payloads.
    fn image_shape(&self) -> Result<(usize, usize)> {
        match self.kind {
            DataKind::Synthetic => Ok((self.synthetic.channels, self.synthetic.side)),
            DataKind::Idx => {
                let p = self.idx_paths()?;
                let mut f = std::fs::File::open(&p.train_images)?;
                let mut head = [0u8; 16];
                std::io::Read::read_exact(&mut f, &mut head)?;
                Ok((
                    1,
                    u32::from_be_bytes(head[8..12].try_into().expect("4 bytes")) as usize,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mode: LossMode,
    pub alpha: f32,
    pub tau: f32,
    /// Checkpoint whose predictions label the distillation token; ground
    /// truth is used when unset.
    pub teacher: Option<PathBuf>,
    /// Unpruned model to distill from. `prune` defaults to its input.
    pub full_teacher: Option<PathBuf>,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        LossSection {
            mode: d.mode,
            alpha: d.alpha,
            tau: d.tau,
            teacher: None,
            full_teacher: None,
        }
    }
}

impl LossSection {
    pub fn config(&self, mode: LossMode) -> LossConfig {
        LossConfig {
            mode,
            alpha: self.alpha,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Objective for training from scratch, where no full model exists yet.
    pub loss_mode: LossMode,
    pub optim: OptimConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            loss_mode: LossMode::CnnOnly,
            optim: OptimConfig::train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub criterion: Criterion,
    pub schedule: PruneSchedule,
    pub optim: OptimConfig,
    /// Also run the aligned-vs-concatenated comparison at this parameter
    /// fraction.
    pub compare_schemes_at: Option<f64>,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            criterion: Criterion::Taylor,
            schedule: PruneSchedule::default(),
            optim: OptimConfig::prune(),
            compare_schemes_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub optim: OptimConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            optim: OptimConfig::finetune(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    Desk,
    Paper,
}

impl GridPreset {
    pub fn grid(self) -> LutGrid {
        match self {
            GridPreset::Desk => LutGrid::desk(),
            GridPreset::Paper => LutGrid::paper(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LutSection {
    /// Saved table; when unset an analytic table is built on the fly.
    pub path: Option<PathBuf>,
    pub grid: GridPreset,
    pub runner: RunnerKind,
    pub batch_size: usize,
    pub repeats: usize,
}

impl Default for LutSection {
    fn default() -> Self {
        LutSection {
            path: None,
            grid: GridPreset::Desk,
            runner: RunnerKind::Analytic,
            batch_size: 1,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NvitSection {
    pub emb: usize,
    pub num_blocks: usize,
    /// Per-block scale; the middle-half default when unset.
    pub epsilon: Option<Vec<f64>>,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for NvitSection {
    fn default() -> Self {
        let r = NvitRule::new(192, 12);
        NvitSection {
            emb: r.emb,
            num_blocks: r.num_blocks,
            epsilon: None,
            patch_size: r.patch_size,
            image_size: r.image_size,
            in_channels: r.in_channels,
            num_classes: r.num_classes,
        }
    }
}

impl NvitSection {
    pub fn rule(&self) -> NvitRule {
        let mut r = NvitRule::new(self.emb, self.num_blocks);
        if let Some(e) = &self.epsilon {
            r.epsilon = e.clone();
        }
        r.patch_size = self.patch_size;
        r.image_size = self.image_size;
        r.in_channels = self.in_channels;
        r.num_classes = self.num_classes;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SparsifySection {
    /// Finetuning epochs with the 2:4 masks held fixed; 0 skips finetuning.
    pub finetune_epochs: usize,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Pruning event log to summarize.
    pub events: Option<PathBuf>,
    /// Test images used for attention diversity of `run.input`.
    pub diversity_images: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            events: None,
            diversity_images: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub finetune: FinetuneSection,
    pub lut: LutSection,
    pub nvit: NvitSection,
    pub sparsify: SparsifySection,
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(|| "config".to_string(), |s| field_at(text, s));
            Error::config(field, e.message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// SHA-256 of the materialized TOML, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Resolves the architecture the `model` section describes.
    pub fn arch(&self) -> Result<ArchSpec> {
        if let Some(a) = &self.model.arch {
            return Ok(a.clone());
        }
        if let Some(p) = &self.model.arch_file {
            return read_arch(p);
        }
        let classes = self.data.classes()?;
        let with_classes = |mut s: ArchSpec| {
            s.num_classes = classes;
            s
        };
        match self.model.preset.as_str() {
            "desk" => Ok(ArchSpec::desk(classes)),
            "deit_tiny" => Ok(with_classes(ArchSpec::deit_tiny())),
            "deit_small" => Ok(with_classes(ArchSpec::deit_small())),
            "deit_base" => Ok(with_classes(ArchSpec::deit_base())),
            other => Err(Error::config(
                "model.preset",
                format!(
                    "unknown preset `{other}` (expected desk, deit_tiny, deit_small or deit_base)"
                ),
            )),
        }
    }

    /// Fills in derived values so the written config is self-contained.
    pub fn materialize(&mut self) -> Result<()> {
        self.model.arch = Some(self.arch()?);
        Ok(())
    }

    /// Checks every section that `command` reads.
    pub fn validate(&self, command: &str) -> Result<()> {
        if self.run.eval_batch == 0 {
            return Err(Error::config("run.eval_batch", "must be >= 1"));
        }
        if self.run.threads == Some(0) {
            return Err(Error::config("run.threads", "must be >= 1"));
        }
        let needs_data = matches!(
            command,
            "train" | "prune" | "finetune" | "sparsify" | "eval"
        );
        if needs_data {
            self.data.classes()?;
            let arch = self.arch()?;
            arch.validate()
                .map_err(|e| Error::config("model.arch", e.to_string()))?;
            let (c, side) = self.data.image_shape()?;
            if arch.in_channels != c || arch.image_size != side {
                return Err(Error::config(
                    "model.arch",
                    format!(
                        "expects {}x{}x{} images, data has {c}x{side}x{side}",
                        arch.in_channels, arch.image_size, arch.image_size
                    ),
                ));
            }
            if arch.num_classes != self.data.classes()? {
                return Err(Error::config(
                    "model.arch.num_classes",
                    "must equal the data class count",
                ));
            }
            self.loss
                .config(self.loss.mode)
                .validate()
                .map_err(|e| Error::config("loss", e.to_string()))?;
        }
        if matches!(command, "prune" | "finetune" | "sparsify" | "eval") && self.run.input.is_none()
        {
            return Err(Error::config(
                "run.input",
                format!("`{command}` needs an input checkpoint"),
            ));
        }
        match command {
            "train" => {
                self.train.optim.validate("train.optim")?;
                if self.train.loss_mode.needs_full_teacher() {
                    return Err(Error::config(
                        "train.loss_mode",
                        format!(
                            "`{}` distills from an unpruned model, which training from scratch lacks",
                            self.train.loss_mode.name()
                        ),
                    ));
                }
            }
            "prune" => {
                self.prune.schedule.validate()?;
                self.prune.optim.validate("prune.optim")?;
                if let Some(f) = self.prune.compare_schemes_at {
                    if !(f > 0.0 && f < 1.0) {
                        return Err(Error::config(
                            "prune.compare_schemes_at",
                            "must be in (0, 1)",
                        ));
                    }
                }
            }
            "finetune" => {
                self.finetune.optim.validate("finetune.optim")?;
                if self.loss.mode.needs_full_teacher() && self.loss.full_teacher.is_none() {
                    return Err(Error::config(
                        "loss.full_teacher",
                        format!(
                            "loss mode `{}` needs the unpruned model",
                            self.loss.mode.name()
                        ),
                    ));
                }
            }
            "sparsify" => self.finetune.optim.validate("finetune.optim")?,
            "generate" => self.nvit.rule().validate()?,
            "profile" => {
                if self.lut.batch_size == 0 {
                    return Err(Error::config("lut.batch_size", "must be >= 1"));
                }
                if self.lut.repeats == 0 {
                    return Err(Error::config("lut.repeats", "must be >= 1"));
                }
            }
            "analyze" => {
                if self.analyze.events.is_none() && self.run.input.is_none() {
                    return Err(Error::config(
                        "analyze.events",
                        "set an event log or run.input",
                    ));
                }
            }
            "eval" => {}
            other => {
                return Err(Error::config(
                    "command",
                    format!("unknown command `{other}`"),
                ))
            }
        }
        Ok(())
    }
}

/// Dotted name of the key at `span`, qualified by the enclosing table header.
fn field_at(text: &str, span: std::ops::Range<usize>) -> String {
    let key = text
        .get(span.clone())
        .unwrap_or("")
        .trim()
        .trim_matches('"');
    let before = text.get(..span.start).unwrap_or("");
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim());
    let key = key.split(['=', '\n']).next().unwrap_or("").trim();
    match (table, key.is_empty()) {
        (Some(t), false) => format!("{t}.{key}"),
        (Some(t), true) => t.to_string(),
        (None, false) => key.to_string(),
        (None, true) => "config".to_string(),
    }
}

/// Architecture file: a TOML document holding one `ArchSpec`.
pub fn read_arch(path: &Path) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("model.arch_file", format!("{}: {e}", path.display())))?;
    let spec: ArchSpec = toml::from_str(&text)
        .map_err(|e| Error::config("model.arch_file", e.message().trim().to_string()))?;
    spec.validate()
        .map_err(|e| Error::config("model.arch_file", e.to_string()))?;
    Ok(spec)
}

pub fn write_arch(spec: &ArchSpec, path: &Path) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| Error::config("model.arch", e.to_string()))?;
    crate::checkpoint::write_atomic(path, text.as_bytes())
}
