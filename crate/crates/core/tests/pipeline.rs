//! End-to-end runs on the synthetic smoke task. One teacher and one baseline
//! run are shared across tests to keep the suite affordable.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use gendd::config::RunConfig;
use gendd::nn::OptimizerKind;
use gendd::data::Batch;
use gendd::pipeline::{self, KlTrainer, Stepper, TrainOutcome};
use tempfile::TempDir;

fn root() -> &'static TempDir {
    static ROOT: OnceLock<TempDir> = OnceLock::new();
    ROOT.get_or_init(|| tempfile::tempdir().unwrap())
}

fn teacher() -> &'static PathBuf {
    static TEACHER: OnceLock<PathBuf> = OnceLock::new();
    TEACHER.get_or_init(|| {
        let config = RunConfig::smoke();
        let (train, _) = pipeline::load_datasets(&config).unwrap();
        let path = root().path().join(pipeline::TEACHER_CHECKPOINT);
        pipeline::train_teacher(&config, &Arc::new(train), &path).unwrap();
        path
    })
}

fn smoke(name: &str) -> RunConfig {
    let mut c = RunConfig::smoke();
    c.run.out_dir = root().path().join(name);
    c.teacher.checkpoint = Some(teacher().clone());
    c
}

fn baseline() -> &'static TrainOutcome {
    static BASE: OnceLock<TrainOutcome> = OnceLock::new();
    BASE.get_or_init(|| pipeline::train_gendd(smoke("base")).unwrap())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn smoke_loss_halves_and_accuracy_is_high() {
    let o = baseline();
    assert_eq!(o.metrics.len(), 200);
    let start = mean(o.metrics[..10].iter().map(|r| r.loss));
    let end = mean(o.metrics[o.metrics.len() - 10..].iter().map(|r| r.loss));
    assert!(end <= 0.5 * start, "loss {start} -> {end}");
    assert!(o.report.top1 >= 0.9, "top1 {}", o.report.top1);
    for file in [pipeline::METRICS_FILE, pipeline::FINAL_CHECKPOINT, "val_summary.csv", "val_predictions.csv", "loss.svg", "effective_config.toml"] {
        assert!(o.out_dir.join(file).exists(), "missing {file}");
    }
}

#[test]
fn same_seed_gives_identical_metrics_and_leaves_teacher_untouched() {
    let before = std::fs::read(teacher()).unwrap();
    let a = baseline();
    let b = pipeline::train_gendd(smoke("replay")).unwrap();
    let csv = |o: &TrainOutcome| std::fs::read(o.out_dir.join(pipeline::METRICS_FILE)).unwrap();
    assert_eq!(csv(a), csv(&b));
    assert_eq!(a.report.top1, b.report.top1);
    assert_eq!(std::fs::read(teacher()).unwrap(), before);
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let full = &baseline().metrics;
    let part = pipeline::train_gendd_steps(smoke("part"), 44).unwrap();
    assert_eq!(part.metrics.len(), 44);
    let out = root().path().join("resumed");
    let resumed = pipeline::resume_gendd(&part.checkpoint, &[format!("run.out_dir='{}'", out.display())], 60).unwrap();
    assert_eq!(resumed.metrics.first().unwrap().step, full[44].step);
    for (r, f) in resumed.metrics.iter().zip(&full[44..60]) {
        let rel = (r.loss - f.loss).abs() / f.loss.abs();
        assert!(rel <= 1e-5, "step {}: {} vs {}", r.step, r.loss, f.loss);
    }
}

#[test]
fn adamw_reaches_lower_loss_than_sgd() {
    let mut c = smoke("sgd");
    c.optimizer.kind = OptimizerKind::Sgd;
    let sgd = pipeline::train_gendd(c).unwrap();
    let (a, s) = (baseline().final_loss(20), sgd.final_loss(20));
    assert!(a < s, "adamw {a} sgd {s}");
}

#[test]
fn full_contraction_is_worse_than_mild() {
    let mut c = smoke("lambda0");
    c.gendd.lambda = 0.0;
    let collapsed = pipeline::train_gendd(c).unwrap();
    assert!(collapsed.report.top1 < baseline().report.top1, "{} vs {}", collapsed.report.top1, baseline().report.top1);
}

#[test]
fn cosine_schedule_is_not_worse_than_step() {
    let mut c = smoke("step");
    c.optimizer.schedule = "step".parse().unwrap();
    let step = pipeline::train_gendd(c).unwrap();
    assert!(baseline().report.top1 >= step.report.top1, "{} vs {}", baseline().report.top1, step.report.top1);
}

#[test]
fn kl_starts_at_zero_when_student_copies_teacher() {
    let mut config = smoke("kl");
    config.kl.unsupervised = true;
    let (train, _) = pipeline::load_datasets(&config).unwrap();
    let teacher = pipeline::obtain_teacher(&mut config, &Arc::new(train.clone())).unwrap();
    let mut trainer = KlTrainer::new(config, &train, teacher.clone()).unwrap();
    trainer.student = teacher;
    let idx: Vec<usize> = (0..32).collect();
    let sub = train.subset(&idx);
    let batch = Batch { index: 0, inputs: sub.inputs.clone(), labels: sub.labels.clone() };
    let (loss, _) = trainer.train_step(&batch, 1e-3).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn evaluating_the_final_checkpoint_reproduces_the_report() {
    let o = baseline();
    let out = root().path().join("eval");
    let r = pipeline::evaluate_checkpoint(&o.checkpoint, &[format!("run.out_dir='{}'", out.display())]).unwrap();
    assert_eq!(r.top1, o.report.top1);
    assert!(out.join("eval_summary.csv").exists());
}

#[test]
fn missing_dataset_is_a_setup_error() {
    let mut c = RunConfig::cifar10_small();
    c.dataset.root = Some(root().path().join("nowhere"));
    c.run.out_dir = root().path().join("cifar");
    let e = pipeline::train_gendd(c).unwrap_err();
    assert!(matches!(e, gendd::error::GenddError::Setup(_)), "{e:?}");
}
