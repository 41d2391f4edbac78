//! Run configuration: a TOML document with stable key names, dotted-key
//! overrides and built-in presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contraction::{CenterSource, DEFAULT_LAMBDA};
use crate::data::SyntheticSpec;
use crate::error::{ensure, GenddError, Result};
use crate::head::HeadArchitecture;
use crate::loss::DEFAULT_CFG_DROP_RATE;
use crate::models::ArchKind;
use crate::nn::{LrScheduleKind, OptimizerKind};
use crate::sampler::{VarianceMode, DEFAULT_GUIDANCE_SCALE, DEFAULT_SAMPLING_STEPS};
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR binaries or the `train`/`val` image folders.
    pub root: Option<PathBuf>,
    pub image_size: u32,
    pub augment: bool,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            root: None,
            image_size: 32,
            augment: false,
            train_limit: None,
            val_limit: None,
            synthetic: SyntheticSpec::smoke(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Architecture default when absent.
    pub width: Option<usize>,
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.arch.default_width())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: ArchKind::Linear, width: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub arch: ArchKind,
    pub width: Option<usize>,
    /// Pretrained teacher; trained in-process from the labels when absent.
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
}

impl TeacherConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig { arch: self.arch, width: self.width }
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            arch: ArchKind::Linear,
            width: None,
            checkpoint: None,
            epochs: 20,
            lr: 1e-2,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrScheduleKind,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Fractions of the total step budget at which the step schedule decays.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: LrScheduleKind::Cosine,
            epochs: 20,
            warmup_epochs: 1,
            milestones: vec![0.625, 0.75, 0.875],
            gamma: 0.1,
            batch_size: 64,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenddConfig {
    /// Token dimension; 0 means the full teacher feature dimension.
    pub token_dim: usize,
    pub lambda: f64,
    pub center_source: CenterSource,
    pub unsupervised: bool,
    pub max_step: usize,
    pub schedule: ScheduleKind,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    pub variance: VarianceMode,
    /// Sampler bound on the clean estimate in standardized units; 0 disables.
    pub clip_x0: f64,
    pub cfg_drop_rate: f64,
    pub hidden_width: usize,
    pub head_arch: HeadArchitecture,
    pub num_blocks: usize,
    pub standardize: bool,
    /// Mix sample pairs with a shared Beta(alpha, alpha) weight.
    pub mixup: bool,
    pub mixup_alpha: f64,
}

impl Default for GenddConfig {
    fn default() -> Self {
        GenddConfig {
            token_dim: 64,
            lambda: DEFAULT_LAMBDA,
            center_source: CenterSource::ClassifierWeights,
            unsupervised: false,
            max_step: 1000,
            schedule: ScheduleKind::Cosine,
            sampling_steps: DEFAULT_SAMPLING_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            variance: VarianceMode::Posterior,
            clip_x0: 10.0,
            cfg_drop_rate: DEFAULT_CFG_DROP_RATE,
            hidden_width: 256,
            head_arch: HeadArchitecture::Residual,
            num_blocks: 3,
            standardize: true,
            mixup: false,
            mixup_alpha: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlConfig {
    pub temperature: f64,
    pub w_kl: f64,
    pub w_ce: f64,
    pub unsupervised: bool,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig { temperature: 1.0, w_kl: 0.5, w_ce: 0.5, unsupervised: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Evaluate every this many epochs during training; 0 only at the end.
    pub eval_every: usize,
    /// Samples per sampler call during evaluation.
    pub eval_batch: usize,
    pub deterministic: bool,
    pub loader_capacity: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            eval_every: 0,
            eval_batch: 256,
            deterministic: true,
            loader_capacity: 4,
        }
    }
}

/// Everything needed to replay a training or evaluation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: ModelConfig,
    pub optimizer: OptimConfig,
    pub gendd: GenddConfig,
    pub kl: KlConfig,
    pub run: RunSection,
}

pub const PRESETS: [&str; 3] = ["smoke", "mismatch", "cifar10-small"];

impl RunConfig {
    /// Two Gaussian classes, linear teacher and student.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        c.student = ModelConfig { arch: ArchKind::Linear, width: Some(8) };
        c.optimizer.epochs = 25;
        c.optimizer.batch_size = 64;
        c.optimizer.lr = 2e-3;
        c.gendd.hidden_width = 128;
        // 64-dim teacher features: one 64-dim token would be the unsplit case
        c.gendd.token_dim = 8;
        c.run.out_dir = PathBuf::from("runs/smoke");
        c
    }

    /// Ten classes, wide teacher features and a narrow student, where the
    /// full-dimension token setting is expected to fail.
    pub fn mismatch() -> Self {
        let mut c = RunConfig::smoke();
        c.dataset.synthetic = SyntheticSpec {
            num_classes: 10,
            input_dim: 32,
            train_per_class: 200,
            val_per_class: 50,
            separation: 4.0,
            noise_std: 1.0,
            imbalance: 1.0,
            seed: 1,
        };
        c.teacher.width = Some(512);
        c.student.width = Some(16);
        c.gendd.hidden_width = 128;
        c.optimizer.epochs = 30;
        c.run.out_dir = PathBuf::from("runs/mismatch");
        c
    }

    /// Reduced CIFAR-10 with a small CNN pair.
    pub fn cifar10_small() -> Self {
        let mut c = RunConfig::default();
        c.dataset.kind = DatasetKind::Cifar10;
        c.dataset.root = std::env::var_os("GENDD_CIFAR10_DIR").map(PathBuf::from);
        c.dataset.augment = true;
        c.dataset.train_limit = Some(10_000);
        c.dataset.val_limit = Some(2_000);
        c.teacher = TeacherConfig {
            arch: ArchKind::CnnWide,
            width: None,
            checkpoint: None,
            epochs: 15,
            lr: 2e-3,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 5e-4,
        };
        c.student = ModelConfig { arch: ArchKind::CnnSmall, width: None };
        c.optimizer.epochs = 15;
        c.optimizer.lr = 1e-3;
        c.optimizer.batch_size = 64;
        c.gendd.hidden_width = 256;
        c.run.out_dir = PathBuf::from("runs/cifar10-small");
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "smoke" => Some(RunConfig::smoke()),
            "mismatch" => Some(RunConfig::mismatch()),
            "cifar10-small" => Some(RunConfig::cifar10_small()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gendd;
        ensure!((0.0..=1.0).contains(&g.lambda), "gendd.lambda must lie in [0, 1], got {}", g.lambda);
        if g.unsupervised {
            ensure!(g.lambda == 1.0, "unsupervised GenDD requires gendd.lambda = 1, got {}", g.lambda);
        }
        ensure!(g.max_step >= 1, "gendd.max_step must be >= 1");
        ensure!(
            (1..=g.max_step).contains(&g.sampling_steps),
            "gendd.sampling_steps must lie in [1, {}]",
            g.max_step
        );
        ensure!(g.guidance_scale >= 0.0, "gendd.guidance_scale must be >= 0");
        ensure!(g.clip_x0 >= 0.0 && g.clip_x0.is_finite(), "gendd.clip_x0 must be finite and >= 0");
        ensure!((0.0..=1.0).contains(&g.cfg_drop_rate), "gendd.cfg_drop_rate must lie in [0, 1]");
        ensure!(g.hidden_width >= 1 && g.num_blocks >= 1, "head sizes must be positive");
        ensure!(g.mixup_alpha > 0.0, "gendd.mixup_alpha must be positive");
        let o = &self.optimizer;
        ensure!(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr must be positive");
        ensure!(o.batch_size >= 1 && o.epochs >= 1, "optimizer.batch_size and optimizer.epochs must be positive");
        ensure!(o.gamma > 0.0, "optimizer.gamma must be positive");
        ensure!(
            o.milestones.iter().all(|m| (0.0..=1.0).contains(m)),
            "optimizer.milestones are fractions of the run and must lie in [0, 1]"
        );
        ensure!(o.grad_clip >= 0.0, "optimizer.grad_clip must be >= 0");
        ensure!(self.kl.temperature > 0.0, "kl.temperature must be positive");
        ensure!(self.kl.w_kl >= 0.0 && self.kl.w_ce >= 0.0, "kl weights must be >= 0");
        ensure!(self.run.eval_batch >= 1, "run.eval_batch must be positive");
        if self.dataset.kind == DatasetKind::Synthetic {
            self.dataset.synthetic.validate()?;
        }
        Ok(())
    }

    /// Reads a TOML file, or a preset when `source` names one.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let mut value = if let Some(preset) = RunConfig::preset(source) {
            toml::Value::try_from(preset).map_err(|e| GenddError::Serialization(e.to_string()))?
        } else {
            let path = Path::new(source);
            let text = fs::read_to_string(path).map_err(|e| GenddError::io(path, e))?;
            let parsed: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| GenddError::Config(format!("{}: {e}", path.display())))?;
            toml::Value::Table(parsed)
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        RunConfig::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| GenddError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| GenddError::Serialization(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        RunConfig::from_value(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GenddError::Serialization(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| GenddError::io(dir, e))?;
        let path = dir.join("effective_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| GenddError::io(&path, e))?;
        Ok(path)
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value`. Intermediate tables are created on demand; unknown
/// keys surface when the result is deserialized.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GenddError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(GenddError::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| GenddError::Config(format!("override `{key}` descends into a non-table value")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| GenddError::Config(format!("override `{key}` descends into a non-table value")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}
