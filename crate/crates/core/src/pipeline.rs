//! End-to-end jobs: teacher preparation, GenDD and KL-baseline training,
//! evaluation through the sampler, ablation sweeps and the theorem check.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelState, ScheduleParams, CHECKPOINT_VERSION};
use crate::config::{DatasetKind, RunConfig};
use crate::contraction::{centers_from_classifier, centers_from_means, CenterSource, ContractionSpec};
use crate::data::{epoch_order, load_cifar_binary, load_image_folder, spawn_loader, Batch, Dataset, ShotGroup, Split};
use crate::error::{ensure, GenddError, Result};
use crate::head::{DenoiserHead, HeadConfig};
use crate::loss::{kl_baseline_loss, training_loss, KlWeights, LossBatchPlan};
use crate::models::{Backbone, Network};
use crate::nn::{log_softmax_row, softmax, LrSchedule, Optimizer, Params};
use crate::report::{append_csv, plot_bars, plot_lines, write_csv, Series};
use crate::sampler::{generate_feature, FeatureLayout, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::theorem::{confidence_sweep, SweepConfig, SweepReport};
use crate::tokenizer::{self, FeatureStats};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";

/// Training and validation splits for the configured dataset.
pub fn load_datasets(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &config.dataset;
    let root = || {
        d.root
            .clone()
            .ok_or_else(|| GenddError::Setup(format!("dataset.root is required for {:?} data", d.kind)))
    };
    let (train, val) = match d.kind {
        DatasetKind::Synthetic => d.synthetic.generate()?,
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let classes = if d.kind == DatasetKind::Cifar10 { 10 } else { 100 };
            let root = root()?;
            (
                load_cifar_binary(&root, classes, Split::Train, d.train_limit)?,
                load_cifar_binary(&root, classes, Split::Val, d.val_limit)?,
            )
        }
        DatasetKind::Folder => {
            let root = root()?;
            let train = load_image_folder(&root.join("train"), d.image_size, None)?;
            let val = load_image_folder(&root.join("val"), d.image_size, None)?;
            (train, val)
        }
    };
    let limit = |ds: Dataset, n: Option<usize>| match n {
        Some(n) if n < ds.len() => ds.truncated(n),
        _ => ds,
    };
    let train = limit(train, d.train_limit);
    let val = limit(val, d.val_limit);
    ensure!(train.len() >= 2 && !val.is_empty(), "dataset is too small: {} train, {} val", train.len(), val.len());
    ensure!(train.num_classes == val.num_classes, "train and val disagree on the class count");
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Step bookkeeping shared by every training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub step: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub lr: LrSchedule,
}

impl LoopState {
    pub fn new(train_len: usize, config: &RunConfig, epochs: usize, base_lr: f64) -> Self {
        let o = &config.optimizer;
        let steps_per_epoch = train_len.div_ceil(o.batch_size.max(1)).max(1);
        let total_steps = steps_per_epoch * epochs.max(1);
        let warmup_steps = (o.warmup_epochs * steps_per_epoch).min(total_steps / 2);
        let milestones = o.milestones.iter().map(|f| (f * total_steps as f64).round() as usize).collect();
        LoopState {
            step: 0,
            steps_per_epoch,
            total_steps,
            lr: LrSchedule { kind: o.schedule, base_lr, warmup_steps, total_steps, milestones, gamma: o.gamma },
        }
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }
}

/// Anything that can take one optimizer step on a batch.
pub trait Stepper {
    fn loop_state(&mut self) -> &mut LoopState;
    /// Returns `(loss, grad_norm)`.
    fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)>;
}

/// Feeds batches to `model` until `until` steps are done. `on_row` sees each
/// metric row and whether it closed an epoch.
pub fn drive<T: Stepper>(
    model: &mut T,
    data: &Arc<Dataset>,
    config: &RunConfig,
    until: usize,
    mut on_row: impl FnMut(&mut T, &MetricRow, bool) -> Result<()>,
) -> Result<()> {
    let seed = config.run.seed;
    loop {
        let state = model.loop_state();
        let until = until.min(state.total_steps);
        if state.step >= until {
            return Ok(());
        }
        let epoch = state.epoch();
        let start = state.step % state.steps_per_epoch;
        let order = epoch_order(data.len(), seed, epoch);
        let augment = config.dataset.augment.then(|| seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let rx = spawn_loader(data.clone(), order, config.optimizer.batch_size, start, augment, config.run.loader_capacity);
        for batch in rx {
            let state = model.loop_state();
            if state.step >= until {
                break;
            }
            let step = state.step;
            let lr = state.lr.lr(step);
            let (loss, grad_norm) = model.train_step(&batch, lr)?;
            let state = model.loop_state();
            state.step += 1;
            let epoch_end = state.step % state.steps_per_epoch == 0;
            on_row(model, &MetricRow { step, epoch, loss, grad_norm, lr }, epoch_end)?;
        }
    }
}

fn clip_scale(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}

fn scale_params<P: Params>(p: &mut P, s: f64) {
    if s != 1.0 {
        p.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v *= s));
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    ensure!(logits.nrows() == labels.len(), "{} labels for {} rows", labels.len(), logits.nrows());
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    let b = logits.nrows().max(1) as f64;
    for (r, &y) in labels.iter().enumerate() {
        loss -= log_softmax_row(&logits.row(r).to_vec())[y];
        grad[[r, y]] -= 1.0;
    }
    grad /= b;
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(GenddError::NonFinite(format!("cross-entropy is {loss}")));
    }
    Ok((loss, grad))
}

struct ClassifierTrainer<'a> {
    network: &'a mut Network,
    optimizer: Optimizer,
    state: LoopState,
}

impl Stepper for ClassifierTrainer<'_> {
    fn loop_state(&mut self) -> &mut LoopState {
        &mut self.state
    }

    fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)> {
        let (logits, features, cache) = self.network.forward(batch.inputs.view())?;
        let (loss, grad) = cross_entropy(logits.view(), &batch.labels)?;
        let grads = self.network.backward(features.view(), &cache, grad.view());
        let norm = grads.sq_norm().sqrt();
        self.optimizer.step("network", self.network, &grads, lr);
        if !self.network.all_finite() {
            return Err(GenddError::NonFinite("classifier parameters became non-finite".into()));
        }
        Ok((loss, norm))
    }
}

/// Cross-entropy training of a classifier network (used for teachers).
pub fn train_classifier(network: &mut Network, train: &Arc<Dataset>, config: &RunConfig) -> Result<Vec<MetricRow>> {
    let t = &config.teacher;
    let state = LoopState::new(train.len(), config, t.epochs, t.lr);
    let mut trainer = ClassifierTrainer { network, optimizer: Optimizer::new(t.optimizer, t.weight_decay), state };
    let mut rows = Vec::new();
    drive(&mut trainer, train, config, usize::MAX, |_, row, _| {
        rows.push(*row);
        Ok(())
    })?;
    Ok(rows)
}

pub fn network_logits(network: &Network, inputs: ArrayView2<f64>, chunk: usize) -> Result<Array2<f64>> {
    let features = network.backbone.features_chunked(inputs, chunk.max(1))?;
    network.classifier.logits(features.view())
}

pub fn classifier_report(network: &Network, data: &Dataset, train_counts: Option<&[usize]>) -> Result<EvalReport> {
    let logits = network_logits(network, data.inputs.view(), 256)?;
    Ok(metrics_from_logits(logits.view(), &data.labels, data.num_classes, train_counts))
}

fn teacher_checkpoint(network: &Network, config: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config.hash()?,
        config_toml: config.to_toml()?,
        step: 0,
        epoch: config.teacher.epochs,
        teacher_checksum: network.checksum(),
        schedule: None,
        state: ModelState::Teacher { network: network.clone() },
        optimizer: None,
        rng: None,
    })
}

/// Builds and trains a teacher from `config.teacher`, saving it to `path`.
pub fn train_teacher(config: &RunConfig, train: &Arc<Dataset>, path: &Path) -> Result<(Network, Vec<MetricRow>)> {
    let t = config.teacher.model();
    let mut network = Network::build(t.arch, train.shape, t.width(), train.num_classes, config.run.seed ^ 0x7eac)?;
    info!("training {} teacher for {} epochs", t.arch, config.teacher.epochs);
    let rows = train_classifier(&mut network, train, config)?;
    teacher_checkpoint(&network, config)?.save(path)?;
    Ok((network, rows))
}

/// Loads the configured teacher, or trains one and records where it was
/// saved so the effective config replays without retraining.
pub fn obtain_teacher(config: &mut RunConfig, train: &Arc<Dataset>) -> Result<Network> {
    if let Some(path) = &config.teacher.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let network = ckpt.teacher()?.clone();
        ensure!(
            network.backbone.input_dim() == train.shape.flat_dim() && network.num_classes() == train.num_classes,
            "teacher {} does not match the dataset (inputs {}, classes {})",
            path.display(),
            train.shape.flat_dim(),
            train.num_classes
        );
        return Ok(network);
    }
    let path = config.run.out_dir.join(TEACHER_CHECKPOINT);
    let (network, _) = train_teacher(config, train, &path)?;
    config.teacher.checkpoint = Some(path);
    Ok(network)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: ShotGroup,
    pub classes: usize,
    pub samples: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// NaN for classes absent from the split.
    pub per_class: Vec<f64>,
    pub shot_groups: Vec<GroupAccuracy>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn write(&self, dir: &Path, tag: &str) -> Result<()> {
        write_csv(&dir.join(format!("{tag}_{PREDICTIONS_FILE}")), &self.predictions)?;
        #[derive(Serialize)]
        struct Row<'a> {
            metric: &'a str,
            value: f64,
        }
        let mut rows = vec![Row { metric: "top1", value: self.top1 }, Row { metric: "top5", value: self.top5 }];
        let names: Vec<String> = (0..self.per_class.len()).map(|c| format!("class_{c}")).collect();
        rows.extend(names.iter().zip(&self.per_class).map(|(n, &v)| Row { metric: n, value: v }));
        let groups: Vec<String> = self.shot_groups.iter().map(|g| format!("{:?}", g.group).to_lowercase()).collect();
        rows.extend(groups.iter().zip(&self.shot_groups).map(|(n, g)| Row { metric: n, value: g.top1 }));
        write_csv(&dir.join(format!("{tag}_{SUMMARY_FILE}")), &rows)
    }
}

/// Accuracy summaries; shot groups are reported when training counts are given.
pub fn metrics_from_logits(logits: ArrayView2<f64>, labels: &[usize], num_classes: usize, train_counts: Option<&[usize]>) -> EvalReport {
    let probs = softmax(logits);
    let k = num_classes.min(5);
    let (mut hits, mut hits5) = (0usize, 0usize);
    let mut class_hits = vec![0usize; num_classes];
    let mut class_total = vec![0usize; num_classes];
    let mut predictions = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut idx: Vec<usize> = (0..num_classes).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let pred = idx[0];
        hits += usize::from(pred == y);
        hits5 += usize::from(idx[..k].contains(&y));
        class_total[y] += 1;
        class_hits[y] += usize::from(pred == y);
        predictions.push(Prediction { index: i, label: y, prediction: pred, confidence: probs[[i, pred]] });
    }
    let n = labels.len().max(1) as f64;
    let per_class = class_hits
        .iter()
        .zip(&class_total)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect();
    let mut shot_groups = Vec::new();
    if let Some(counts) = train_counts {
        for group in [ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few] {
            let members: Vec<usize> = (0..num_classes).filter(|&c| ShotGroup::of(counts[c]) == group).collect();
            let samples: usize = members.iter().map(|&c| class_total[c]).sum();
            if samples == 0 {
                continue;
            }
            let correct: usize = members.iter().map(|&c| class_hits[c]).sum();
            shot_groups.push(GroupAccuracy { group, classes: members.len(), samples, top1: correct as f64 / samples as f64 });
        }
    }
    EvalReport { top1: hits as f64 / n, top5: hits5 as f64 / n, per_class, shot_groups, predictions }
}

/// The generative inference path: student conditions, sampled features,
/// frozen teacher classifier.
pub struct GenddModel<'a> {
    pub teacher: &'a Network,
    pub student: &'a Backbone,
    pub head: &'a DenoiserHead,
    pub stats: &'a FeatureStats,
    pub schedule: &'a NoiseSchedule,
}

impl GenddModel<'_> {
    fn check(&self) -> Result<()> {
        let d = self.teacher.classifier.feature_dim();
        ensure!(self.stats.dim() == d, "feature stats have dim {}, teacher features have {d}", self.stats.dim());
        ensure!(
            self.head.config.num_positions == tokenizer::num_tokens(d, self.head.config.token_dim),
            "head expects {} tokens of dim {}, which does not tile {d} features",
            self.head.config.num_positions,
            self.head.config.token_dim
        );
        ensure!(
            self.head.config.cond_dim == self.student.output_dim(),
            "head condition dim {} differs from student output {}",
            self.head.config.cond_dim,
            self.student.output_dim()
        );
        Ok(())
    }

    /// Teacher-classifier logits of generated features. Chunks run in
    /// parallel; sample offsets make results independent of chunking.
    pub fn logits(&self, inputs: ArrayView2<f64>, sampler: &SamplerConfig, chunk: usize) -> Result<Array2<f64>> {
        self.check()?;
        let chunk = chunk.max(1);
        let n = inputs.nrows();
        let layout = FeatureLayout { feature_dim: self.stats.dim(), token_dim: self.head.config.token_dim };
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts: Vec<Result<Array2<f64>>> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + chunk).min(n);
                let cond = self.student.features(inputs.slice(s![start..end, ..]))?;
                let features = generate_feature(self.head, self.schedule, cond.view(), layout, Some(self.stats), sampler, start)?;
                self.teacher.classifier.logits(features.view())
            })
            .collect();
        let mut out = Array2::zeros((n, self.teacher.num_classes()));
        for (&start, part) in starts.iter().zip(parts) {
            let part = part?;
            out.slice_mut(s![start..start + part.nrows(), ..]).assign(&part);
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset, sampler: &SamplerConfig, chunk: usize, train_counts: Option<&[usize]>) -> Result<EvalReport> {
        let logits = self.logits(data.inputs.view(), sampler, chunk)?;
        Ok(metrics_from_logits(logits.view(), &data.labels, data.num_classes, train_counts))
    }
}

pub fn sampler_config(config: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        steps: config.gendd.sampling_steps,
        guidance_scale: config.gendd.guidance_scale,
        variance: config.gendd.variance,
        seed: config.run.seed ^ 0x5a3d,
        clip_x0: config.gendd.clip_x0,
    }
}

/// GenDD optimization state over the student backbone and diffusion head.
pub struct GenddTrainer {
    pub config: RunConfig,
    pub train: Arc<Dataset>,
    pub teacher: Network,
    pub teacher_checksum: String,
    pub stats: FeatureStats,
    pub spec: ContractionSpec,
    pub schedule: NoiseSchedule,
    pub student: Backbone,
    pub head: DenoiserHead,
    pub optimizer: Optimizer,
    pub state: LoopState,
    pub rng: ChaCha8Rng,
}

impl fmt::Debug for GenddTrainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenddTrainer").field("step", &self.state.step).field("total", &self.state.total_steps).finish()
    }
}

impl GenddTrainer {
    pub fn new(config: RunConfig, train: Arc<Dataset>, teacher: Network) -> Result<Self> {
        config.validate()?;
        let g = &config.gendd;
        let seed = config.run.seed;
        let teacher_features = teacher.backbone.features_chunked(train.inputs.view(), 256)?;
        let feature_dim = teacher_features.ncols();
        let stats = if g.standardize { FeatureStats::fit_rows(teacher_features.view())? } else { FeatureStats::identity(feature_dim) };
        let spec = if g.unsupervised {
            ContractionSpec::unsupervised(feature_dim)
        } else {
            let centers = match g.center_source {
                CenterSource::ClassifierWeights => {
                    centers_from_classifier(teacher.classifier.weight.view(), g.standardize.then_some(&stats))?
                }
                CenterSource::EmpiricalMeans => {
                    let standardized = stats.apply(teacher_features.view())?;
                    centers_from_means(standardized.view(), &train.labels, train.num_classes)?
                }
            };
            ContractionSpec::new(g.lambda, centers, g.center_source)?
        };
        let schedule = NoiseSchedule::build(g.schedule, g.max_step)?;
        let s = &config.student;
        let student = Backbone::build(s.arch, train.shape, s.width(), seed.wrapping_add(1))?;
        let token_dim = if g.token_dim == 0 { feature_dim } else { g.token_dim.min(feature_dim) };
        let head_config = HeadConfig {
            num_blocks: g.num_blocks,
            architecture: g.head_arch,
            ..HeadConfig::new(token_dim, student.output_dim(), tokenizer::num_tokens(feature_dim, token_dim), g.hidden_width)
        };
        let head = DenoiserHead::init(head_config, seed.wrapping_add(2))?;
        let optimizer = Optimizer::new(config.optimizer.kind, config.optimizer.weight_decay);
        let state = LoopState::new(train.len(), &config, config.optimizer.epochs, config.optimizer.lr);
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let teacher_checksum = teacher.checksum();
        Ok(GenddTrainer { config, train, teacher, teacher_checksum, stats, spec, schedule, student, head, optimizer, state, rng })
    }

    /// Rebuilds the trainer and restores everything a checkpoint carries.
    pub fn resume(config: RunConfig, train: Arc<Dataset>, teacher: Network, ckpt: Checkpoint) -> Result<Self> {
        let mut t = GenddTrainer::new(config, train, teacher)?;
        ensure!(ckpt.teacher_checksum == t.teacher_checksum, "checkpoint was trained against a different teacher");
        let ModelState::Gendd { student, head, stats } = ckpt.state else {
            return Err(GenddError::Validation(format!("expected a gendd checkpoint, found `{}`", ckpt.state.kind())));
        };
        ensure!(head.config == t.head.config, "checkpoint head shape differs from the configured head");
        ensure!(student.num_params() == t.student.num_params(), "checkpoint student differs from the configured student");
        ensure!(stats.dim() == t.stats.dim(), "checkpoint feature stats have the wrong dimension");
        t.student = student;
        t.head = head;
        t.stats = stats;
        t.optimizer = ckpt.optimizer.ok_or_else(|| GenddError::Validation("checkpoint lacks optimizer state".into()))?;
        t.rng = ckpt.rng.ok_or_else(|| GenddError::Validation("checkpoint lacks RNG state".into()))?;
        t.state.step = ckpt.step;
        Ok(t)
    }

    pub fn feature_dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn model(&self) -> GenddModel<'_> {
        GenddModel { teacher: &self.teacher, student: &self.student, head: &self.head, stats: &self.stats, schedule: &self.schedule }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash()?,
            config_toml: self.config.to_toml()?,
            step: self.state.step,
            epoch: self.state.epoch(),
            teacher_checksum: self.teacher_checksum.clone(),
            schedule: Some(ScheduleParams {
                kind: self.config.gendd.schedule,
                max_step: self.config.gendd.max_step,
                sampling_steps: self.config.gendd.sampling_steps,
            }),
            state: ModelState::Gendd { student: self.student.clone(), head: self.head.clone(), stats: self.stats.clone() },
            optimizer: Some(self.optimizer.clone()),
            rng: Some(self.rng.clone()),
        })
    }

    /// One optimizer step on raw inputs; returns `(loss, grad_norm)`.
    pub fn step(&mut self, inputs: ArrayView2<f64>, labels: &[usize], lr: f64) -> Result<(f64, f64)> {
        let g = self.config.gendd.clone();
        let teacher = self.teacher.backbone.features(inputs)?;
        let mut targets = self.stats.apply(teacher.view())?;
        let mut inputs = inputs.to_owned();
        let mixed_spec;
        let (spec, labels) = if g.mixup {
            // contract first, then mix inputs and targets with one shared weight
            let beta = Beta::new(g.mixup_alpha, g.mixup_alpha).map_err(|e| GenddError::Config(e.to_string()))?;
            let mix: f64 = beta.sample(&mut self.rng);
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            perm.shuffle(&mut self.rng);
            for (r, &y) in labels.iter().enumerate() {
                let contracted = self.spec.contract(&targets.row(r).to_vec(), Some(y))?;
                targets.row_mut(r).assign(&Array1::from(contracted));
            }
            targets = &targets * mix + &targets.select(Axis(0), &perm) * (1.0 - mix);
            inputs = &inputs * mix + &inputs.select(Axis(0), &perm) * (1.0 - mix);
            mixed_spec = ContractionSpec::unsupervised(self.feature_dim());
            (&mixed_spec, None)
        } else {
            (&self.spec, Some(labels).filter(|_| self.spec.requires_labels()))
        };
        let (cond, cache) = self.student.forward(inputs.view())?;
        let token_dim = self.head.config.token_dim;
        let batch = tokenizer::split(targets.view(), token_dim, cond.view(), labels)?;
        let plan = LossBatchPlan::sample(&mut self.rng, batch.batch_size(), batch.num_tokens(), token_dim, g.max_step, g.cfg_drop_rate)?;
        let out = training_loss(&self.head, &self.schedule, &batch, spec, &plan)?;
        let mut head_grads = out.head_grads;
        let mut student_grads = self.student.backward(&cache, out.condition_grads.view());
        let norm = (head_grads.sq_norm() + student_grads.sq_norm()).sqrt();
        let scale = clip_scale(norm, self.config.optimizer.grad_clip);
        scale_params(&mut head_grads, scale);
        scale_params(&mut student_grads, scale);
        self.optimizer.step("head", &mut self.head.params, &head_grads, lr);
        self.optimizer.step("student", &mut self.student, &student_grads, lr);
        if !out.loss.is_finite() || !self.head.params.all_finite() || !self.student.all_finite() {
            return Err(GenddError::NonFinite(format!("loss {} or parameters became non-finite at step {}", out.loss, self.state.step)));
        }
        Ok((out.loss, norm))
    }

    /// Loss of the next step without updating anything.
    pub fn peek_loss(&self, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let mut probe = GenddTrainer {
            config: self.config.clone(),
            train: self.train.clone(),
            teacher: self.teacher.clone(),
            teacher_checksum: self.teacher_checksum.clone(),
            stats: self.stats.clone(),
            spec: self.spec.clone(),
            schedule: self.schedule.clone(),
            student: self.student.clone(),
            head: self.head.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
            rng: self.rng.clone(),
        };
        let lr = self.state.lr.lr(self.state.step);
        Ok(probe.step(inputs, labels, lr)?.0)
    }
}

impl Stepper for GenddTrainer {
    fn loop_state(&mut self) -> &mut LoopState {
        &mut self.state
    }

    fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)> {
        self.step(batch.inputs.view(), &batch.labels, lr)
    }
}

/// Rows are buffered and appended to the CSV at epoch boundaries.
struct MetricSink {
    path: PathBuf,
    pending: Vec<MetricRow>,
    all: Vec<MetricRow>,
}

impl MetricSink {
    fn new(dir: &Path, fresh: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        if fresh && path.exists() {
            fs::remove_file(&path).map_err(|e| GenddError::io(&path, e))?;
        }
        Ok(MetricSink { path, pending: Vec::new(), all: Vec::new() })
    }

    fn push(&mut self, row: &MetricRow) {
        self.pending.push(*row);
        self.all.push(*row);
    }

    fn flush(&mut self) -> Result<()> {
        if !self.pending.is_empty() {
            append_csv(&self.path, &self.pending)?;
            self.pending.clear();
        }
        Ok(())
    }

    fn plot(&self, dir: &Path, title: &str) -> Result<()> {
        let points = self.all.iter().map(|r| (r.step as f64, r.loss)).collect();
        let positive = self.all.iter().all(|r| r.loss > 0.0);
        plot_lines(&dir.join("loss.svg"), title, "step", "loss", &[Series { name: "loss".into(), points }], positive)
    }
}

/// Summary of a finished training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricRow>,
    pub report: EvalReport,
    pub best_top1: Option<f64>,
    pub teacher_top1: f64,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.metrics.len();
        let tail = &self.metrics[n.saturating_sub(window.max(1))..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn prepare_run(config: &mut RunConfig) -> Result<(Arc<Dataset>, Dataset, Network)> {
    config.validate()?;
    let out = config.run.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| GenddError::io(&out, e))?;
    let (train, val) = load_datasets(config)?;
    let train = Arc::new(train);
    let teacher = obtain_teacher(config, &train)?;
    config.write_snapshot(&out)?;
    Ok((train, val, teacher))
}

fn run_gendd(mut trainer: GenddTrainer, val: &Dataset, fresh: bool, until: usize) -> Result<TrainOutcome> {
    let out = trainer.config.run.out_dir.clone();
    let teacher_top1 = classifier_report(&trainer.teacher, val, None)?.top1;
    let sampler = sampler_config(&trainer.config);
    let counts = trainer.train.class_counts();
    let eval_every = trainer.config.run.eval_every;
    let eval_batch = trainer.config.run.eval_batch;
    let mut sink = MetricSink::new(&out, fresh)?;
    let mut last_good = trainer.checkpoint()?;
    let mut best: Option<f64> = None;
    let data = trainer.train.clone();
    let config = trainer.config.clone();
    let result = drive(&mut trainer, &data, &config, until, |t, row, epoch_end| {
        sink.push(row);
        if epoch_end {
            sink.flush()?;
            last_good = t.checkpoint()?;
            if eval_every > 0 && (row.epoch + 1) % eval_every == 0 {
                let report = t.model().evaluate(val, &sampler, eval_batch, Some(&counts))?;
                info!("epoch {} val top1 {:.4}", row.epoch + 1, report.top1);
                if best.is_none_or(|b| report.top1 > b) {
                    best = Some(report.top1);
                    last_good.save(&out.join(BEST_CHECKPOINT))?;
                }
            }
        }
        Ok(())
    });
    sink.flush()?;
    if let Err(e) = result {
        if matches!(e, GenddError::NonFinite(_)) {
            let path = out.join(LAST_GOOD_CHECKPOINT);
            warn!("non-finite values; saving last good state to {}", path.display());
            last_good.save(&path)?;
        }
        return Err(e);
    }
    ensure!(trainer.teacher.checksum() == trainer.teacher_checksum, "teacher parameters changed during training");
    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint()?.save(&path)?;
    let report = trainer.model().evaluate(val, &sampler, eval_batch, Some(&counts))?;
    report.write(&out, "val")?;
    sink.plot(&out, "GenDD training loss")?;
    Ok(TrainOutcome { out_dir: out, metrics: sink.all, report, best_top1: best, teacher_top1, checkpoint: path })
}

/// Full GenDD job: data, teacher, training, final evaluation and artifacts.
pub fn train_gendd(mut config: RunConfig) -> Result<TrainOutcome> {
    let (train, val, teacher) = prepare_run(&mut config)?;
    let trainer = GenddTrainer::new(config, train, teacher)?;
    run_gendd(trainer, &val, true, usize::MAX)
}

/// Like [`train_gendd`] but stops after `steps` optimizer steps.
pub fn train_gendd_steps(mut config: RunConfig, steps: usize) -> Result<TrainOutcome> {
    let (train, val, teacher) = prepare_run(&mut config)?;
    let trainer = GenddTrainer::new(config, train, teacher)?;
    run_gendd(trainer, &val, true, steps)
}

/// Config stored inside a checkpoint, with optional overrides applied.
pub fn checkpoint_config(ckpt: &Checkpoint, overrides: &[String]) -> Result<RunConfig> {
    let value: toml::Value =
        toml::from_str(&ckpt.config_toml).map_err(|e| GenddError::Config(format!("stored config: {e}")))?;
    RunConfig::from_value(value)?.with_overrides(overrides)
}

/// Continues a GenDD run from a checkpoint up to `until` steps.
pub fn resume_gendd(path: &Path, overrides: &[String], until: usize) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(path)?;
    let mut config = checkpoint_config(&ckpt, overrides)?;
    let (train, val, teacher) = prepare_run(&mut config)?;
    let trainer = GenddTrainer::resume(config, train, teacher, ckpt)?;
    run_gendd(trainer, &val, false, until)
}

/// Validation accuracy of a GenDD or KL checkpoint.
pub fn evaluate_checkpoint(path: &Path, overrides: &[String]) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(path)?;
    let mut config = checkpoint_config(&ckpt, overrides)?;
    config.validate()?;
    let (train, val) = load_datasets(&config)?;
    let out = config.run.out_dir.clone();
    let report = match &ckpt.state {
        ModelState::Teacher { network } | ModelState::Kl { student: network } => {
            classifier_report(network, &val, Some(&train.class_counts()))?
        }
        ModelState::Gendd { student, head, stats } => {
            let train = Arc::new(train);
            let teacher = obtain_teacher(&mut config, &train)?;
            ensure!(teacher.checksum() == ckpt.teacher_checksum, "teacher checksum differs from the one recorded in the checkpoint");
            let params = ckpt.schedule.ok_or_else(|| GenddError::Validation("checkpoint lacks schedule params".into()))?;
            let schedule = NoiseSchedule::build(params.kind, params.max_step)?;
            let model = GenddModel { teacher: &teacher, student, head, stats, schedule: &schedule };
            model.evaluate(&val, &sampler_config(&config), config.run.eval_batch, Some(&train.class_counts()))?
        }
    };
    fs::create_dir_all(&out).map_err(|e| GenddError::io(&out, e))?;
    report.write(&out, "eval")?;
    Ok(report)
}

/// Accuracy of an untrained head on top of an untrained student: the chance
/// reference for a trainer's configuration.
pub fn random_head_baseline(trainer: &GenddTrainer, val: &Dataset) -> Result<EvalReport> {
    let seed = trainer.config.run.seed ^ 0xbad5eed;
    let head = DenoiserHead::init(trainer.head.config.clone(), seed)?;
    let s = &trainer.config.student;
    let student = Backbone::build(s.arch, trainer.train.shape, s.width(), seed)?;
    let model = GenddModel { teacher: &trainer.teacher, student: &student, head: &head, stats: &trainer.stats, schedule: &trainer.schedule };
    model.evaluate(val, &sampler_config(&trainer.config), trainer.config.run.eval_batch, None)
}

/// Conventional logit distillation of a student with its own classifier.
pub struct KlTrainer {
    pub config: RunConfig,
    pub teacher: Network,
    pub student: Network,
    pub weights: KlWeights,
    pub optimizer: Optimizer,
    pub state: LoopState,
}

impl KlTrainer {
    pub fn new(config: RunConfig, train: &Dataset, teacher: Network) -> Result<Self> {
        config.validate()?;
        let s = &config.student;
        let student = Network::build(s.arch, train.shape, s.width(), train.num_classes, config.run.seed.wrapping_add(1))?;
        let k = &config.kl;
        let weights = KlWeights { temperature: k.temperature, w_kl: k.w_kl, w_ce: if k.unsupervised { 0.0 } else { k.w_ce } };
        let optimizer = Optimizer::new(config.optimizer.kind, config.optimizer.weight_decay);
        let state = LoopState::new(train.len(), &config, config.optimizer.epochs, config.optimizer.lr);
        Ok(KlTrainer { config, teacher, student, weights, optimizer, state })
    }
}

impl Stepper for KlTrainer {
    fn loop_state(&mut self) -> &mut LoopState {
        &mut self.state
    }

    fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)> {
        let teacher_logits = self.teacher.logits(batch.inputs.view())?;
        let (logits, features, cache) = self.student.forward(batch.inputs.view())?;
        let labels = (self.weights.w_ce > 0.0).then_some(batch.labels.as_slice());
        let out = kl_baseline_loss(teacher_logits.view(), logits.view(), labels, self.weights)?;
        let mut grads = self.student.backward(features.view(), &cache, out.grad.view());
        let norm = grads.sq_norm().sqrt();
        scale_params(&mut grads, clip_scale(norm, self.config.optimizer.grad_clip));
        self.optimizer.step("student", &mut self.student, &grads, lr);
        if !out.loss.is_finite() || !self.student.all_finite() {
            return Err(GenddError::NonFinite(format!("KL loss {} or student parameters became non-finite", out.loss)));
        }
        Ok((out.loss, norm))
    }
}

/// Full KL-baseline job; evaluation uses the student's own classifier.
pub fn train_kl(mut config: RunConfig) -> Result<TrainOutcome> {
    let (train, val, teacher) = prepare_run(&mut config)?;
    let teacher_checksum = teacher.checksum();
    let teacher_top1 = classifier_report(&teacher, &val, None)?.top1;
    let out = config.run.out_dir.clone();
    let mut trainer = KlTrainer::new(config.clone(), &train, teacher)?;
    let mut sink = MetricSink::new(&out, true)?;
    let result = drive(&mut trainer, &train, &config, usize::MAX, |_, row, epoch_end| {
        sink.push(row);
        if epoch_end {
            sink.flush()?;
        }
        Ok(())
    });
    sink.flush()?;
    result?;
    ensure!(trainer.teacher.checksum() == teacher_checksum, "teacher parameters changed during training");
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config.hash()?,
        config_toml: config.to_toml()?,
        step: trainer.state.step,
        epoch: trainer.state.epoch(),
        teacher_checksum,
        schedule: None,
        state: ModelState::Kl { student: trainer.student.clone() },
        optimizer: Some(trainer.optimizer.clone()),
        rng: None,
    };
    let path = out.join(FINAL_CHECKPOINT);
    ckpt.save(&path)?;
    let report = classifier_report(&trainer.student, &val, Some(&train.class_counts()))?;
    report.write(&out, "val")?;
    sink.plot(&out, "KL baseline training loss")?;
    Ok(TrainOutcome { out_dir: out, metrics: sink.all, report, best_top1: None, teacher_top1, checkpoint: path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    TokenDim,
    Lambda,
    Optimizer,
    LrSchedule,
}

impl Sweep {
    pub fn key(self) -> &'static str {
        match self {
            Sweep::TokenDim => "gendd.token_dim",
            Sweep::Lambda => "gendd.lambda",
            Sweep::Optimizer => "optimizer.kind",
            Sweep::LrSchedule => "optimizer.schedule",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::TokenDim => "token_dim",
            Sweep::Lambda => "lambda",
            Sweep::Optimizer => "optimizer",
            Sweep::LrSchedule => "lr_schedule",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "token_dim" => Ok(Sweep::TokenDim),
            "lambda" => Ok(Sweep::Lambda),
            "optimizer" => Ok(Sweep::Optimizer),
            "lr_schedule" => Ok(Sweep::LrSchedule),
            _ => Err(GenddError::Config(format!("unknown sweep `{s}` (token_dim, lambda, optimizer, lr_schedule)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub value: String,
    pub top1: f64,
    pub top5: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Paired runs over one config axis sharing a single teacher. Writes
/// `ablation_<sweep>.csv` and a bar plot.
pub fn ablate(mut config: RunConfig, sweep: Sweep, values: &[String]) -> Result<Vec<AblationRow>> {
    ensure!(!values.is_empty(), "ablation needs at least one value");
    let (train, _, _) = prepare_run(&mut config)?;
    let base = config.run.out_dir.clone();
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        // "full" means one token spanning the whole feature
        let raw = if sweep == Sweep::TokenDim && value == "full" { "0".to_string() } else { value.clone() };
        let mut run = config.with_overrides(&[format!("{}={raw}", sweep.key())])?;
        run.run.out_dir = base.join(format!("{}_{}", sweep.name(), value));
        if sweep == Sweep::Lambda {
            run.gendd.unsupervised = false;
        }
        info!("ablation {sweep}={value}");
        let outcome = train_gendd(run)?;
        rows.push(AblationRow {
            sweep: sweep.name().into(),
            value: value.clone(),
            top1: outcome.report.top1,
            top5: outcome.report.top5,
            final_loss: outcome.final_loss(train.len().div_ceil(config.optimizer.batch_size)),
            steps: outcome.metrics.len(),
        });
    }
    write_csv(&base.join(format!("ablation_{}.csv", sweep.name())), &rows)?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.value.clone(), r.top1)).collect();
    plot_bars(&base.join(format!("ablation_{}.svg", sweep.name())), &format!("{sweep} ablation"), "top-1", &bars)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub index: usize,
    pub mean: f64,
    pub std: f64,
}

/// Teacher feature statistics over the training split, written to
/// `feature_stats.csv`.
pub fn export_stats(mut config: RunConfig) -> Result<FeatureStats> {
    let (train, _, teacher) = prepare_run(&mut config)?;
    let features = teacher.backbone.features_chunked(train.inputs.view(), 256)?;
    let stats = FeatureStats::fit_rows(features.view())?;
    let rows: Vec<StatRow> = stats
        .mean
        .iter()
        .zip(&stats.std)
        .enumerate()
        .map(|(index, (&mean, &std))| StatRow { index, mean, std })
        .collect();
    write_csv(&config.run.out_dir.join("feature_stats.csv"), &rows)?;
    Ok(stats)
}

/// Runs the confidence sweep and writes `theorem_buckets.csv` plus a
/// residual-vs-confidence plot.
pub fn verify_theorem(sweep: &SweepConfig, out_dir: &Path) -> Result<SweepReport> {
    let report = confidence_sweep(sweep)?;
    write_csv(&out_dir.join("theorem_buckets.csv"), &report.buckets)?;
    #[derive(Serialize)]
    struct Summary {
        high_confidence_count: usize,
        high_confidence_median_residual: f64,
        high_confidence_median_cosine: f64,
        monotone: bool,
        skipped: usize,
        passed: bool,
    }
    write_csv(
        &out_dir.join("theorem_summary.csv"),
        &[Summary {
            high_confidence_count: report.high_confidence_count,
            high_confidence_median_residual: report.high_confidence_median_residual,
            high_confidence_median_cosine: report.high_confidence_median_cosine,
            monotone: report.monotone,
            skipped: report.skipped,
            passed: report.passed(),
        }],
    )?;
    let points = report.buckets.iter().map(|b| (b.median_confidence, b.median_residual)).collect();
    plot_lines(
        &out_dir.join("theorem_residual.svg"),
        "surrogate residual vs confidence",
        "median p(y|x)",
        "median residual",
        &[Series { name: "residual".into(), points }],
        true,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_count_hits_and_groups() {
        let logits = ndarray::array![[2.0, 1.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0], [1.0, 0.0, 0.0]];
        let labels = [0, 2, 0, 1];
        let r = metrics_from_logits(logits.view(), &labels, 3, Some(&[150, 50, 5]));
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.top5, 1.0);
        assert_eq!(r.per_class[0], 0.5);
        assert_eq!(r.per_class[2], 1.0);
        assert_eq!(r.shot_groups.len(), 3);
        assert_eq!(r.shot_groups[0].group, ShotGroup::Many);
        assert_eq!(r.shot_groups[0].samples, 2);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = ndarray::array![[0.3, -1.0], [2.0, 0.5]];
        let (loss, grad) = cross_entropy(logits.view(), &[0, 1]).unwrap();
        assert!(loss > 0.0);
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
        assert!(cross_entropy(logits.view(), &[0]).is_err());
    }

    #[test]
    fn loop_state_budgets() {
        let mut c = RunConfig::smoke();
        c.optimizer.batch_size = 10;
        c.optimizer.epochs = 4;
        let s = LoopState::new(95, &c, 4, 1.0);
        assert_eq!(s.steps_per_epoch, 10);
        assert_eq!(s.total_steps, 40);
        assert_eq!(s.lr.warmup_steps, 10);
        assert_eq!(s.lr.milestones, vec![25, 30, 35]);
    }

    #[test]
    fn sweep_names_parse() {
        for s in [Sweep::TokenDim, Sweep::Lambda, Sweep::Optimizer, Sweep::LrSchedule] {
            assert_eq!(s.name().parse::<Sweep>().unwrap(), s);
        }
        assert!("depth".parse::<Sweep>().is_err());
    }
}
